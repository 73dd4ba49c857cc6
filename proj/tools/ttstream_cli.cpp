#include <cstdint>
#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ttstream/ttstream.hpp"

namespace {

std::vector<std::int64_t> parse_int_list(const std::string& text) {
  std::vector<std::int64_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stoll(item));
  }
  if (out.empty()) throw CLI::ValidationError("expected a comma-separated list");
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    out.push_back(std::stod(item));
  }
  if (out.empty()) throw CLI::ValidationError("expected a comma-separated list");
  return out;
}

struct CliOptions {
  ttstream::RunConfig cfg;
  std::string dims_text;
  std::string data_path;
  std::string meta_path;
  std::string out;
  std::string checkpoint_path;
  std::string indices_path;
  std::string batch_sizes_text;
  std::string ranks_text;
  std::string snrs_text;
};

void add_model_options(CLI::App* cmd, CliOptions& opt) {
  cmd->add_option("--rank", opt.cfg.rank, "initial model TT-rank R");
  cmd->add_option("--batch-size", opt.cfg.batch_size, "stream batch size S");
  cmd->add_option("--test-fraction", opt.cfg.test_fraction,
                  "fraction of observations held out for testing");
  cmd->add_option("--max-iters", opt.cfg.max_inner_iters,
                  "maximum inner sweeps per batch");
  cmd->add_option("--tol", opt.cfg.inner_tolerance,
                  "inner convergence tolerance on mean change");
  cmd->add_option("--alpha0", opt.cfg.alpha0, "Gamma prior shape");
  cmd->add_option("--beta0", opt.cfg.beta0, "Gamma prior rate");
  cmd->add_option("--prior-variance", opt.cfg.prior_variance,
                  "initial element variance");
  cmd->add_option("--data-seed", opt.cfg.data_seed, "seed for data randomness");
  cmd->add_option("--init-seed", opt.cfg.init_seed, "seed for model init");
  cmd->add_option("--repeats", opt.cfg.repeats, "independent repeats");
  cmd->add_option("--noise-update", opt.cfg.noise_update,
                  "noise update placement: per-core or per-sweep");
  cmd->add_flag("--wall-clock", opt.cfg.wall_clock,
                "record real per-batch seconds in CSVs (not reproducible)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"streaming Bayesian tensor-train completion"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value config file");
  app.fallthrough();

  CliOptions opt;

  auto* generate = app.add_subcommand(
      "generate", "sample a synthetic TT tensor and write noisy observations");
  generate->add_option("--dims", opt.dims_text, "mode lengths, e.g. 20,20,20,20")
      ->required();
  generate->add_option("--true-rank", opt.cfg.true_rank, "generator TT-rank");
  generate->add_option("--snr", opt.cfg.snr_db, "signal-to-noise ratio in dB");
  generate->add_option("--fraction", opt.cfg.observe_fraction,
                       "observed fraction of tensor elements");
  generate->add_option("--seed", opt.cfg.data_seed, "generator seed");
  generate->add_option("--out", opt.out, "output prefix for .coo/.meta.json")
      ->required();

  auto* fit = app.add_subcommand("fit", "stream a COO dataset into a model");
  fit->add_option("--data", opt.data_path, "COO observations file")->required();
  fit->add_option("--meta", opt.meta_path,
                  "metadata sidecar; enables noiseless-truth evaluation");
  fit->add_option("--dims", opt.dims_text,
                  "mode lengths (required without --meta)");
  fit->add_option("--out", opt.out, "output directory")->required();
  add_model_options(fit, opt);

  auto* predict = app.add_subcommand("predict", "predict entries from a checkpoint");
  predict->add_option("--checkpoint", opt.checkpoint_path, "model checkpoint")
      ->required();
  predict->add_option("--indices", opt.indices_path,
                      "text file of one-based index tuples")
      ->required();
  predict->add_option("--out", opt.out, "output file (mean variance per line)")
      ->required();

  auto* sweep = app.add_subcommand(
      "sweep", "grid of {batch size} x {rank} x {SNR} synthetic experiments");
  sweep->add_option("--dims", opt.dims_text, "mode lengths")->required();
  sweep->add_option("--true-rank", opt.cfg.true_rank, "generator TT-rank");
  sweep->add_option("--fraction", opt.cfg.observe_fraction,
                    "observed fraction of tensor elements");
  sweep->add_option("--batch-sizes", opt.batch_sizes_text,
                    "comma-separated batch sizes")
      ->required();
  sweep->add_option("--ranks", opt.ranks_text, "comma-separated model ranks")
      ->required();
  sweep->add_option("--snrs", opt.snrs_text, "comma-separated SNR values (dB)")
      ->required();
  sweep->add_option("--out", opt.out, "output directory")->required();
  add_model_options(sweep, opt);

  CLI11_PARSE(app, argc, argv);

  try {
    if (!opt.dims_text.empty()) opt.cfg.dims = parse_int_list(opt.dims_text);

    if (generate->parsed()) {
      // generate validates through RunConfig; model rank is irrelevant here
      const auto files = ttstream::run_generate(opt.cfg, opt.out);
      std::cout << "wrote " << files.coo_path << " and " << files.meta_path
                << "\n";
    } else if (fit->parsed()) {
      opt.cfg.output_dir = opt.out;
      const auto report =
          ttstream::run_fit_files(opt.cfg, opt.data_path, opt.meta_path);
      std::cout << "final error mean " << report.mean_error << " (std "
                << report.std_error << ") over " << report.final_errors.size()
                << " repeat(s); report in " << opt.out << "/report.csv\n";
    } else if (predict->parsed()) {
      ttstream::run_predict(opt.checkpoint_path, opt.indices_path, opt.out);
      std::cout << "wrote " << opt.out << "\n";
    } else if (sweep->parsed()) {
      opt.cfg.output_dir = opt.out;
      const auto report = ttstream::run_sweep(
          opt.cfg, parse_int_list(opt.batch_sizes_text),
          [&] {
            std::vector<int> ranks;
            for (auto r : parse_int_list(opt.ranks_text)) {
              ranks.push_back(static_cast<int>(r));
            }
            return ranks;
          }(),
          parse_double_list(opt.snrs_text));
      std::cout << report.rows.size() << " grid cell(s); report in " << opt.out
                << "/sweep.csv\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
