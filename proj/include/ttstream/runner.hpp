#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ttstream/metrics.hpp"
#include "ttstream/svb_engine.hpp"
#include "ttstream/synthetic.hpp"
#include "ttstream/tensor_data.hpp"
#include "ttstream/tt_posterior.hpp"

namespace ttstream {

/// Everything a reproducible run needs; echoed verbatim into every report.
struct RunConfig {
  std::vector<std::int64_t> dims;
  int rank = 3;       // initial model TT-rank R, ranks (1,R,...,R,1)
  int true_rank = 3;  // generator TT-rank for synthetic data
  std::int64_t batch_size = 512;
  double snr_db = 20.0;
  double observe_fraction = 0.15;
  double test_fraction = 0.10;
  int max_inner_iters = 100;
  double inner_tolerance = 1e-4;
  double alpha0 = 1e-3;
  double beta0 = 1e-3;
  double prior_variance = 1.0;
  std::uint64_t data_seed = 1;
  std::uint64_t init_seed = 2;
  int repeats = 1;
  std::string noise_update = "per-core";  // per-core | per-sweep
  bool wall_clock = false;  // real per-batch seconds in CSVs (not reproducible)
  std::string output_dir;

  void validate() const {
    TensorShape{dims}.validate();
    if (rank < 1 || true_rank < 1) throw std::invalid_argument("rank must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");
    if (!(observe_fraction > 0.0 && observe_fraction <= 1.0)) {
      throw std::invalid_argument("observe_fraction must lie in (0,1]");
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
      throw std::invalid_argument("test_fraction must lie in (0,1)");
    }
    if (noise_update != "per-core" && noise_update != "per-sweep") {
      throw std::invalid_argument("noise_update must be per-core or per-sweep");
    }
  }

  EngineConfig engine() const {
    EngineConfig cfg;
    cfg.max_inner_iters = max_inner_iters;
    cfg.inner_tolerance = inner_tolerance;
    cfg.noise_update = noise_update == "per-sweep" ? NoiseUpdate::PerSweep
                                                   : NoiseUpdate::PerCore;
    return cfg;
  }
};

namespace detail {

constexpr std::uint64_t kGroundTruthSalt = 0xA1;
constexpr std::uint64_t kObserveSalt = 0xA2;
constexpr std::uint64_t kSplitSalt = 0xB1;
constexpr std::uint64_t kPartitionSalt = 0xB2;
constexpr std::uint64_t kInitSalt = 0xC1;

inline std::uint64_t repeat_seed(std::uint64_t base, std::uint64_t salt,
                                 int repeat) {
  return mix_seed(mix_seed(base, salt), static_cast<std::uint64_t>(repeat));
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string fmt_int_list(const std::vector<std::int64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> config_echo(
    const RunConfig& cfg) {
  using detail::fmt_double;
  return {
      {"dims", detail::fmt_int_list(cfg.dims)},
      {"rank", std::to_string(cfg.rank)},
      {"true_rank", std::to_string(cfg.true_rank)},
      {"batch_size", std::to_string(cfg.batch_size)},
      {"snr_db", fmt_double(cfg.snr_db)},
      {"observe_fraction", fmt_double(cfg.observe_fraction)},
      {"test_fraction", fmt_double(cfg.test_fraction)},
      {"max_inner_iters", std::to_string(cfg.max_inner_iters)},
      {"inner_tolerance", fmt_double(cfg.inner_tolerance)},
      {"alpha0", fmt_double(cfg.alpha0)},
      {"beta0", fmt_double(cfg.beta0)},
      {"prior_variance", fmt_double(cfg.prior_variance)},
      {"data_seed", std::to_string(cfg.data_seed)},
      {"init_seed", std::to_string(cfg.init_seed)},
      {"repeats", std::to_string(cfg.repeats)},
      {"noise_update", cfg.noise_update},
      {"wall_clock", cfg.wall_clock ? "true" : "false"},
  };
}

struct RunReport {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<ErrorLog> logs;           // one per repeat
  std::vector<double> final_errors;     // one per repeat
  double mean_error = 0.0;
  double std_error = 0.0;
};

namespace detail {

inline void summarize(RunReport& report) {
  const auto n = report.final_errors.size();
  double sum = 0.0;
  for (auto e : report.final_errors) sum += e;
  report.mean_error = sum / static_cast<double>(n);
  double sq = 0.0;
  for (auto e : report.final_errors) {
    const double dev = e - report.mean_error;
    sq += dev * dev;
  }
  report.std_error = n > 1 ? std::sqrt(sq / static_cast<double>(n - 1)) : 0.0;
}

inline void write_config_comments(
    std::ofstream& out,
    const std::vector<std::pair<std::string, std::string>>& echo) {
  for (const auto& [key, value] : echo) {
    out << "# " << key << " = " << value << '\n';
  }
}

}  // namespace detail

/// Streams one dataset: split, partition, fit per repeat; writes
/// rep<i>/errors.csv, rep<i>/model.ckpt and report.csv under output_dir.
/// When gt is non-null the test error is measured against noiseless truth.
inline RunReport run_fit(const RunConfig& cfg, const ObservationBatch& data,
                         const GroundTruth* gt) {
  cfg.validate();
  if (!(data.shape == TensorShape{cfg.dims})) {
    throw std::invalid_argument("data shape does not match configured dims");
  }
  if (cfg.output_dir.empty()) throw std::invalid_argument("output_dir not set");
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);

  RunReport report;
  report.config = config_echo(cfg);

  for (int rep = 0; rep < cfg.repeats; ++rep) {
    const auto split = split_train_test(
        data, cfg.test_fraction,
        detail::repeat_seed(cfg.data_seed, detail::kSplitSalt, rep));
    const auto batches = partition_stream(
        split.train, static_cast<std::size_t>(cfg.batch_size),
        detail::repeat_seed(cfg.data_seed, detail::kPartitionSalt, rep));

    PriorConfig prior;
    prior.prior_variance = cfg.prior_variance;
    prior.alpha0 = cfg.alpha0;
    prior.beta0 = cfg.beta0;
    prior.init_seed = detail::repeat_seed(cfg.init_seed, detail::kInitSalt, rep);
    ModelState state =
        init_state(data.shape, TTRanks::uniform(data.shape.order(), cfg.rank),
                   prior);

    ErrorLog log;
    auto t_prev = std::chrono::steady_clock::now();
    state = run_stream(
        std::move(state), batches, cfg.engine(),
        [&](std::size_t t, const ModelState& s) {
          const auto t_now = std::chrono::steady_clock::now();
          const double seconds =
              std::chrono::duration<double>(t_now - t_prev).count();
          t_prev = t_now;
          const double err = gt ? evaluate_on_test(s, split.test, *gt)
                                : evaluate_on_test(s, split.test);
          log.per_batch.push_back(ErrorLogEntry{t, err, seconds});
        });

    const fs::path rep_dir = fs::path(cfg.output_dir) / ("rep" + std::to_string(rep));
    fs::create_directories(rep_dir);
    write_error_log_csv((rep_dir / "errors.csv").string(), log, cfg.wall_clock);
    checkpoint_save(state, (rep_dir / "model.ckpt").string());

    report.final_errors.push_back(log.final_error());
    report.logs.push_back(std::move(log));
  }
  detail::summarize(report);

  std::ofstream out(fs::path(cfg.output_dir) / "report.csv");
  if (!out) throw std::runtime_error("cannot write report.csv");
  detail::write_config_comments(out, report.config);
  out << "repeat,final_error,mean_error,std_error\n";
  for (std::size_t i = 0; i < report.final_errors.size(); ++i) {
    out << i << ',' << detail::fmt_double(report.final_errors[i]) << ','
        << detail::fmt_double(report.mean_error) << ','
        << detail::fmt_double(report.std_error) << '\n';
  }
  return report;
}

struct GeneratedFiles {
  std::string coo_path;
  std::string meta_path;
};

/// Samples a TT ground truth, observes a noisy fraction of its entries and
/// writes <prefix>.coo plus <prefix>.meta.json.
inline GeneratedFiles run_generate(const RunConfig& cfg,
                                   const std::string& prefix) {
  cfg.validate();
  const TensorShape shape{cfg.dims};
  const auto gt_seed = detail::mix_seed(cfg.data_seed, detail::kGroundTruthSalt);
  const auto obs_seed = detail::mix_seed(cfg.data_seed, detail::kObserveSalt);

  const GroundTruth gt = sample_ground_truth(
      shape, TTRanks::uniform(shape.order(), cfg.true_rank), gt_seed);
  const ObservationBatch batch =
      corrupt_and_observe(gt, cfg.snr_db, cfg.observe_fraction, obs_seed);

  GeneratedFiles files;
  files.coo_path = prefix + ".coo";
  files.meta_path = prefix + ".meta.json";
  if (const auto parent = std::filesystem::path(prefix).parent_path();
      !parent.empty()) {
    std::filesystem::create_directories(parent);
  }
  save_coo(files.coo_path, batch);

  DatasetMeta meta;
  meta.dims = cfg.dims;
  meta.ranks = TTRanks::uniform(shape.order(), cfg.true_rank).r;
  meta.snr_db = cfg.snr_db;
  meta.sigma2 = make_noise_spec(gt, cfg.snr_db).sigma2;
  meta.observe_fraction = cfg.observe_fraction;
  meta.seed = gt_seed;
  meta.count = static_cast<std::int64_t>(batch.size());
  save_metadata(files.meta_path, meta);
  return files;
}

/// Loads a COO dataset and fits it. With a metadata sidecar the ground truth
/// is regenerated and the run is scored against noiseless values.
inline RunReport run_fit_files(RunConfig cfg, const std::string& data_path,
                               const std::string& meta_path) {
  GroundTruth gt;
  bool have_gt = false;
  if (!meta_path.empty()) {
    const DatasetMeta meta = load_metadata(meta_path);
    if (cfg.dims.empty()) cfg.dims = meta.dims;
    if (cfg.dims != meta.dims) {
      throw std::invalid_argument("configured dims disagree with metadata");
    }
    gt = ground_truth_from_meta(meta);
    have_gt = true;
  }
  if (cfg.dims.empty()) {
    throw std::invalid_argument("dims required when no metadata is given");
  }
  const ObservationBatch data = load_coo(data_path, TensorShape{cfg.dims});
  return run_fit(cfg, data, have_gt ? &gt : nullptr);
}

/// Predicts mean and implied variance for each index in a text file
/// (one-based indices, one tuple per line).
inline void run_predict(const std::string& checkpoint_path,
                        const std::string& indices_path,
                        const std::string& output_path) {
  const ModelState state = checkpoint_load(checkpoint_path);
  std::ifstream in(indices_path);
  if (!in) throw std::runtime_error("cannot open indices file: " + indices_path);
  std::ofstream out(output_path);
  if (!out) throw std::runtime_error("cannot write predictions: " + output_path);

  const std::size_t order = state.shape.order();
  std::string line;
  std::size_t line_no = 0;
  char buf[64];
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    IndexTuple index(order);
    for (std::size_t d = 0; d < order; ++d) {
      std::int64_t one_based = 0;
      if (!(fields >> one_based)) {
        throw std::runtime_error(indices_path + ":" + std::to_string(line_no) +
                                 ": expected " + std::to_string(order) +
                                 " indices");
      }
      index[d] = one_based - 1;
    }
    if (!index_valid(state.shape, index)) {
      throw std::runtime_error(indices_path + ":" + std::to_string(line_no) +
                               ": index out of range");
    }
    const PredictiveMoments pm = predictive_moments(state, index);
    const double variance =
        std::max(pm.second_moment - pm.mean * pm.mean, 0.0);
    std::snprintf(buf, sizeof(buf), "%.17g %.17g\n", pm.mean, variance);
    out << buf;
  }
  if (!out) throw std::runtime_error("prediction write failed: " + output_path);
}

struct SweepRow {
  std::int64_t batch_size = 0;
  int rank = 0;
  double snr_db = 0.0;
  int repeats = 0;
  double mean_error = 0.0;
  double std_error = 0.0;
};

struct SweepReport {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<SweepRow> rows;
};

/// Cross product of {batch size} x {rank} x {SNR}: synthetic data generated
/// per SNR, one fit aggregate per cell, all in per-cell directories plus a
/// combined sweep.csv.
inline SweepReport run_sweep(const RunConfig& base,
                             const std::vector<std::int64_t>& batch_sizes,
                             const std::vector<int>& ranks,
                             const std::vector<double>& snrs) {
  base.validate();
  if (batch_sizes.empty() || ranks.empty() || snrs.empty()) {
    throw std::invalid_argument("sweep grid must be nonempty");
  }
  if (base.output_dir.empty()) throw std::invalid_argument("output_dir not set");
  namespace fs = std::filesystem;
  fs::create_directories(base.output_dir);

  SweepReport sweep;
  sweep.config = config_echo(base);

  const TensorShape shape{base.dims};
  const auto gt_seed = detail::mix_seed(base.data_seed, detail::kGroundTruthSalt);
  const auto obs_seed = detail::mix_seed(base.data_seed, detail::kObserveSalt);
  const GroundTruth gt = sample_ground_truth(
      shape, TTRanks::uniform(shape.order(), base.true_rank), gt_seed);

  for (double snr : snrs) {
    const ObservationBatch data =
        corrupt_and_observe(gt, snr, base.observe_fraction, obs_seed);
    for (auto batch_size : batch_sizes) {
      for (int rank : ranks) {
        RunConfig cell = base;
        cell.snr_db = snr;
        cell.batch_size = batch_size;
        cell.rank = rank;
        std::ostringstream name;
        name << "cell_S" << batch_size << "_R" << rank << "_SNR" << snr;
        cell.output_dir = (fs::path(base.output_dir) / name.str()).string();
        const RunReport rr = run_fit(cell, data, &gt);
        sweep.rows.push_back(SweepRow{batch_size, rank, snr, cell.repeats,
                                      rr.mean_error, rr.std_error});
      }
    }
  }

  std::ofstream out(fs::path(base.output_dir) / "sweep.csv");
  if (!out) throw std::runtime_error("cannot write sweep.csv");
  detail::write_config_comments(out, sweep.config);
  out << "batch_size,rank,snr_db,repeats,mean_error,std_error\n";
  for (const auto& row : sweep.rows) {
    out << row.batch_size << ',' << row.rank << ','
        << detail::fmt_double(row.snr_db) << ',' << row.repeats << ','
        << detail::fmt_double(row.mean_error) << ','
        << detail::fmt_double(row.std_error) << '\n';
  }
  return sweep;
}

// ---------------------------------------------------------------------------
// Report readers; the round-trip counterpart of the CSV writers above.

namespace detail {

inline std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) fields.push_back(field);
  return fields;
}

inline std::map<std::string, std::string> read_config_comments(
    std::ifstream& in, std::string& first_data_line) {
  std::map<std::string, std::string> config;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] != '#') {
      first_data_line = line;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(1, eq - 1);
    std::string value = line.substr(eq + 1);
    const auto trim = [](std::string& s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
    };
    trim(key);
    trim(value);
    config[key] = value;
  }
  return config;
}

}  // namespace detail

struct FitReportData {
  std::map<std::string, std::string> config;
  struct Row {
    int repeat = 0;
    double final_error = 0.0;
    double mean_error = 0.0;
    double std_error = 0.0;
  };
  std::vector<Row> rows;
};

inline FitReportData read_fit_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open report: " + path);
  std::string header;
  FitReportData data;
  data.config = detail::read_config_comments(in, header);
  if (header != "repeat,final_error,mean_error,std_error") {
    throw std::runtime_error("bad report header in " + path);
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = detail::split_csv_row(line);
    if (fields.size() != 4) throw std::runtime_error("bad report row in " + path);
    FitReportData::Row row;
    row.repeat = std::stoi(fields[0]);
    row.final_error = std::stod(fields[1]);
    row.mean_error = std::stod(fields[2]);
    row.std_error = std::stod(fields[3]);
    data.rows.push_back(row);
  }
  return data;
}

struct SweepReportData {
  std::map<std::string, std::string> config;
  std::vector<SweepRow> rows;
};

inline SweepReportData read_sweep_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open sweep report: " + path);
  std::string header;
  SweepReportData data;
  data.config = detail::read_config_comments(in, header);
  if (header != "batch_size,rank,snr_db,repeats,mean_error,std_error") {
    throw std::runtime_error("bad sweep header in " + path);
  }
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto fields = detail::split_csv_row(line);
    if (fields.size() != 6) throw std::runtime_error("bad sweep row in " + path);
    SweepRow row;
    row.batch_size = std::stoll(fields[0]);
    row.rank = std::stoi(fields[1]);
    row.snr_db = std::stod(fields[2]);
    row.repeats = std::stoi(fields[3]);
    row.mean_error = std::stod(fields[4]);
    row.std_error = std::stod(fields[5]);
    data.rows.push_back(row);
  }
  return data;
}

}  // namespace ttstream
