// ssmd: semi-supervised detection toolkit CLI.
//
// Subcommands: gen-data, train, eval, ablate, plot.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>

#include <iostream>

#include "ssmd/commands.hpp"

namespace {

int dispatch(int argc, char** argv) {
  CLI::App app{"ssmd: consistency-trained student/teacher detector toolkit"};
  app.require_subcommand(1);

  // gen-data -----------------------------------------------------------
  ssmd::GenDataArgs gen;
  CLI::App* cmd_gen = app.add_subcommand("gen-data", "generate a synthetic detection dataset");
  cmd_gen->add_option("--out", gen.out, "output directory")->required();
  cmd_gen->add_option("--count", gen.count, "number of images");
  cmd_gen->add_option("--seed", gen.seed, "generation + split seed");
  cmd_gen->add_option("--labeled-ratio", gen.labeled_ratio, "labeled fraction of the train split");
  cmd_gen->add_option("--image-size", gen.spec.image_size, "square image side");
  cmd_gen->add_option("--classes", gen.spec.num_classes, "number of foreground classes");
  cmd_gen->add_option("--min-objects", gen.spec.min_objects, "min blobs per image");
  cmd_gen->add_option("--max-objects", gen.spec.max_objects, "max blobs per image");
  cmd_gen->add_option("--min-radius", gen.spec.min_radius, "min blob semi-axis (px)");
  cmd_gen->add_option("--max-radius", gen.spec.max_radius, "max blob semi-axis (px)");
  cmd_gen->add_option("--noise", gen.spec.noise_sigma, "background noise sigma");
  cmd_gen->add_flag("--force", gen.force, "overwrite a non-empty output directory");

  // train ---------------------------------------------------------------
  ssmd::TrainArgs train;
  std::string train_mode;
  std::uint64_t train_seed = 0;
  int train_epochs = -1;
  double train_ratio = -1.0;
  CLI::App* cmd_train = app.add_subcommand("train", "train a detector");
  cmd_train->add_option("--config", train.config_path, "config file (JSON)");
  cmd_train->add_option("--out", train.out, "run directory")->required();
  cmd_train->add_option("--data", train.data_dir, "dataset directory");
  CLI::Option* opt_mode =
      cmd_train->add_option("--mode", train_mode, "supervised | csd | ssmd");
  CLI::Option* opt_seed = cmd_train->add_option("--seed", train_seed, "run seed");
  CLI::Option* opt_epochs = cmd_train->add_option("--epochs", train_epochs, "training epochs");
  CLI::Option* opt_ratio =
      cmd_train->add_option("--labeled-ratio", train_ratio, "labeled fraction of train");
  cmd_train->add_option("--set", train.overrides, "KEY=VALUE config override (repeatable)");
  cmd_train->add_flag("--resume", train.resume, "resume from the run directory's last.ckpt");
  cmd_train->add_flag("--force", train.force, "allow writing into a non-empty run directory");

  // eval ----------------------------------------------------------------
  ssmd::EvalArgs eval;
  std::string budgets_csv;
  double eval_thresh = -1.0;
  CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint or a records file");
  cmd_eval->add_option("--checkpoint", eval.checkpoint, "checkpoint file");
  cmd_eval->add_option("--data", eval.data_dir, "dataset directory (default: from checkpoint)");
  cmd_eval->add_option("--split", eval.split, "labeled | unlabeled | val | test");
  cmd_eval->add_option("--dets", eval.dets_file, "detection records file");
  cmd_eval->add_option("--gts", eval.gts_file, "ground-truth records file");
  cmd_eval->add_option("--out", eval.out, "report directory")->required();
  cmd_eval->add_option("--fp-budgets", budgets_csv, "comma-separated FROC budgets");
  CLI::Option* opt_thresh =
      cmd_eval->add_option("--score-threshold", eval_thresh, "detection score threshold");
  cmd_eval->add_flag("--use-teacher", eval.use_teacher,
                     "evaluate the EMA teacher (diagnostics only)");

  // ablate ---------------------------------------------------------------
  ssmd::AblateArgs ablate;
  std::string seeds_csv;
  int ablate_epochs = -1;
  CLI::App* cmd_ablate =
      app.add_subcommand("ablate", "incremental module sweep: csd, +acc, +nrb, +iap");
  cmd_ablate->add_option("--out", ablate.out, "sweep directory")->required();
  cmd_ablate->add_option("--data", ablate.data_dir, "dataset directory")->required();
  cmd_ablate->add_option("--config", ablate.config_path, "base config file");
  cmd_ablate->add_option("--set", ablate.overrides, "KEY=VALUE config override (repeatable)");
  cmd_ablate->add_option("--seeds", seeds_csv, "comma-separated seeds (default 1,2,3)");
  CLI::Option* opt_aep = cmd_ablate->add_option("--epochs", ablate_epochs, "epochs per run");
  cmd_ablate->add_flag("--force", ablate.force, "overwrite a non-empty sweep directory");

  // plot -----------------------------------------------------------------
  ssmd::PlotArgs plot;
  CLI::App* cmd_plot = app.add_subcommand("plot", "emit loss/PR/FROC curves and overlays");
  cmd_plot->add_option("--run", plot.run_dir, "run directory with metrics.csv");
  cmd_plot->add_option("--eval", plot.eval_dir, "eval report directory");
  cmd_plot->add_option("--checkpoint", plot.checkpoint, "checkpoint for a detection overlay");
  cmd_plot->add_option("--data", plot.data_dir, "dataset directory for the overlay");
  cmd_plot->add_option("--split", plot.split, "split for the overlay image");
  cmd_plot->add_option("--image-index", plot.image_index, "image index within the split");
  cmd_plot->add_option("--out", plot.out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  if (cmd_gen->parsed()) return ssmd::run_gen_data(gen);
  if (cmd_train->parsed()) {
    if (*opt_mode) train.mode = train_mode;
    if (*opt_seed) train.seed = train_seed;
    if (*opt_epochs) train.epochs = train_epochs;
    if (*opt_ratio) train.labeled_ratio = train_ratio;
    return ssmd::run_train(train);
  }
  if (cmd_eval->parsed()) {
    if (!budgets_csv.empty()) {
      std::stringstream ss(budgets_csv);
      std::string tok;
      while (std::getline(ss, tok, ',')) eval.fp_budgets.push_back(std::stod(tok));
    }
    if (*opt_thresh) eval.score_thresh = eval_thresh;
    return ssmd::run_eval(eval);
  }
  if (cmd_ablate->parsed()) {
    if (!seeds_csv.empty()) {
      ablate.seeds.clear();
      std::stringstream ss(seeds_csv);
      std::string tok;
      while (std::getline(ss, tok, ',')) ablate.seeds.push_back(std::stoull(tok));
    }
    if (*opt_aep) ablate.epochs = ablate_epochs;
    return ssmd::run_ablate(ablate);
  }
  if (cmd_plot->parsed()) return ssmd::run_plot(plot);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ssmd::usage_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ssmd::data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const ssmd::numeric_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
