#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "support/oracles.hpp"
#include "ttstream/ttstream.hpp"

using namespace ttstream;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

bool exact_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.array() == b.array()).all();
}

bool states_equal(const ModelState& a, const ModelState& b) {
  if (!(a.shape == b.shape) || a.ranks.r != b.ranks.r) return false;
  if (a.noise.alpha != b.noise.alpha || a.noise.beta != b.noise.beta) return false;
  if (a.batches_seen != b.batches_seen) return false;
  if (a.variance_clamps != b.variance_clamps) return false;
  for (std::size_t d = 0; d < a.cores.size(); ++d) {
    for (std::size_t j = 0; j < a.cores[d].mean.size(); ++j) {
      if (!exact_equal(a.cores[d].mean[j], b.cores[d].mean[j])) return false;
      if (!exact_equal(a.cores[d].variance[j], b.cores[d].variance[j])) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("ranks validation") {
  REQUIRE_NOTHROW(TTRanks::uniform(3, 2).validate(3));
  REQUIRE_THROWS_AS(TTRanks::uniform(3, 2).validate(4), std::invalid_argument);
  TTRanks bad;
  bad.r = {2, 3, 1};
  REQUIRE_THROWS_AS(bad.validate(2), std::invalid_argument);
  bad.r = {1, 0, 1};
  REQUIRE_THROWS_AS(bad.validate(2), std::invalid_argument);
}

TEST_CASE("init_state matches the reference initialization") {
  const TensorShape shape{{4, 3, 5}};
  const TTRanks ranks = TTRanks::uniform(3, 2);
  PriorConfig prior;
  prior.init_seed = 1234;
  const ModelState state = init_state(shape, ranks, prior);

  // alpha0 = beta0 = 1e-3 gives E[tau] = 1
  REQUIRE(state.noise.expected_precision() == 1.0);
  REQUIRE(state.batches_seen == 0);

  for (std::size_t d = 0; d < 3; ++d) {
    REQUIRE(state.cores[d].num_slices() ==
            static_cast<std::size_t>(shape.dims[d]));
    REQUIRE(state.cores[d].rank_left() == ranks.r[d]);
    REQUIRE(state.cores[d].rank_right() == ranks.r[d + 1]);
    for (std::size_t j = 0; j < state.cores[d].num_slices(); ++j) {
      REQUIRE((state.cores[d].variance[j].array() == 1.0).all());
      REQUIRE((state.cores[d].mean[j].array() > 0.0).all());
      REQUIRE((state.cores[d].mean[j].array() < 1.0).all());
    }
  }

  const ModelState again = init_state(shape, ranks, prior);
  REQUIRE(states_equal(state, again));

  prior.init_seed = 1235;
  REQUIRE_FALSE(states_equal(state, init_state(shape, ranks, prior)));

  TTRanks wrong = TTRanks::uniform(2, 2);
  REQUIRE_THROWS_AS(init_state(shape, wrong, prior), std::invalid_argument);
}

TEST_CASE("predict_mean multiplies mean slices") {
  // D=2, ranks (1,1,1), both slices 2.0 -> 4.0
  const TensorShape shape{{1, 1}};
  ModelState state = init_state(shape, TTRanks::uniform(2, 1), PriorConfig{});
  state.cores[0].mean[0](0, 0) = 2.0;
  state.cores[1].mean[0](0, 0) = 2.0;
  REQUIRE(predict_mean(state, {0, 0}) == 4.0);

  state.cores[1].mean[0](0, 0) = 0.0;
  REQUIRE(predict_mean(state, {0, 0}) == 0.0);

  REQUIRE_THROWS_AS(predict_mean(state, {0, 1}), std::invalid_argument);
  REQUIRE_THROWS_AS(predict_mean(state, {0}), std::invalid_argument);
}

TEST_CASE("predict_mean ranks (1,2,1) is a dot product") {
  const TensorShape shape{{2, 2}};
  ModelState state = init_state(shape, TTRanks::uniform(2, 2), PriorConfig{});
  state.cores[0].mean[0] << 1.0, 2.0;   // 1x2 row
  state.cores[1].mean[1] << 3.0, 4.0;   // 2x1 column
  REQUIRE(predict_mean(state, {0, 1}) == 11.0);
}

TEST_CASE("predict_mean agrees with path-sum oracle and is multilinear") {
  const TensorShape shape{{3, 4, 2, 3}};
  const auto state =
      oracles::random_state(shape, TTRanks::uniform(4, 3), 17, 0.1, 0.5);
  detail::Rng rng(18);
  for (int trial = 0; trial < 30; ++trial) {
    IndexTuple idx(4);
    for (std::size_t d = 0; d < 4; ++d) {
      idx[d] = static_cast<std::int64_t>(
          rng.below(static_cast<std::uint64_t>(shape.dims[d])));
    }
    REQUIRE_THAT(predict_mean(state, idx),
                 WithinAbs(oracles::path_sum_value(state, idx), 1e-12));

    // scaling one core's slice scales the prediction
    ModelState scaled = state;
    const double c = 0.25 + rng.uniform01();
    scaled.cores[2].mean[static_cast<std::size_t>(idx[2])] *= c;
    REQUIRE_THAT(predict_mean(scaled, idx),
                 WithinRel(c * predict_mean(state, idx), 1e-12));
  }
}

TEST_CASE("slice_second_moment scalar and deterministic cases") {
  const TensorShape shape{{2}};
  ModelState state = init_state(shape, TTRanks::uniform(1, 1), PriorConfig{});
  state.cores[0].mean[0](0, 0) = 1.5;
  state.cores[0].variance[0](0, 0) = 0.25;
  const Matrix m = slice_second_moment(state.cores[0], 0);
  REQUIRE(m.rows() == 1);
  REQUIRE(m.cols() == 1);
  REQUIRE(m(0, 0) == 1.5 * 1.5 + 0.25);

  // zero variance collapses to kron(mean, mean)
  const auto rich =
      oracles::random_state(TensorShape{{3, 3}}, TTRanks::uniform(2, 3), 4, 0.1, 0.2);
  CorePosterior core = rich.cores[0];
  for (auto& v : core.variance) v.setZero();
  for (std::int64_t j = 0; j < 3; ++j) {
    const Matrix& mean = core.mean[static_cast<std::size_t>(j)];
    REQUIRE(exact_equal(slice_second_moment(core, j), kron(mean, mean)));
  }

  REQUIRE_THROWS_AS(slice_second_moment(core, 3), std::invalid_argument);
}

TEST_CASE("slice_second_moment places variances on block diagonals") {
  // 1x2 slice, mean (1,2), variances (0.5, 0.25) -> row (1.5, 2, 2, 4.25)
  CorePosterior core;
  core.mean = {Matrix(1, 2)};
  core.variance = {Matrix(1, 2)};
  core.mean[0] << 1.0, 2.0;
  core.variance[0] << 0.5, 0.25;
  const Matrix m = slice_second_moment(core, 0);
  REQUIRE(m.rows() == 1);
  REQUIRE(m.cols() == 4);
  REQUIRE(m(0, 0) == 1.5);
  REQUIRE(m(0, 1) == 2.0);
  REQUIRE(m(0, 2) == 2.0);
  REQUIRE(m(0, 3) == 4.25);
}

TEST_CASE("slice_second_moment matches Monte-Carlo sampling") {
  const auto state = oracles::random_state(TensorShape{{2, 3, 2}},
                                           TTRanks::uniform(3, 2), 21, 0.05, 0.3);
  const Matrix analytic = slice_second_moment(state.cores[1], 1);
  const Matrix sampled =
      oracles::mc_slice_second_moment(state.cores[1], 1, 1000000, 900);
  REQUIRE((sampled - analytic).norm() <= 0.01 * analytic.norm());
}

TEST_CASE("predictive_moments limits and scalar case") {
  // all variances zero -> second moment equals mean^2
  auto state = oracles::random_state(TensorShape{{3, 2, 3}},
                                     TTRanks::uniform(3, 2), 31, 0.1, 0.4);
  ModelState deterministic = state;
  for (auto& core : deterministic.cores) {
    for (auto& v : core.variance) v.setZero();
  }
  const auto pm0 = predictive_moments(deterministic, {1, 0, 2});
  REQUIRE_THAT(pm0.second_moment, WithinRel(pm0.mean * pm0.mean, 1e-12));

  // D=1 scalar: (m, m^2 + v)
  ModelState scalar = init_state(TensorShape{{2}}, TTRanks::uniform(1, 1), PriorConfig{});
  scalar.cores[0].mean[1](0, 0) = -0.75;
  scalar.cores[0].variance[1](0, 0) = 0.5;
  const auto pm1 = predictive_moments(scalar, {1});
  REQUIRE(pm1.mean == -0.75);
  REQUIRE(pm1.second_moment == 0.75 * 0.75 + 0.5);
}

TEST_CASE("predictive_moments matches the sampling oracle") {
  const TensorShape shape{{3, 2, 4}};
  const auto state =
      oracles::random_state(shape, TTRanks::uniform(3, 2), 41, 0.05, 0.3);
  const IndexTuple idx{2, 1, 0};
  const auto pm = predictive_moments(state, idx);
  REQUIRE_THAT(pm.mean, WithinAbs(predict_mean(state, idx), 1e-14));
  const auto mc = mc_second_moment_oracle(state, idx, 1000000, 4242);
  REQUIRE(std::abs(mc.second_moment - pm.second_moment) <=
          std::max(0.01 * pm.second_moment, 3.0 * mc.std_error));
}

TEST_CASE("implied predictive variance is nonnegative") {
  detail::Rng rng(55);
  for (int trial = 0; trial < 50; ++trial) {
    const TensorShape shape{{2, 3, 2}};
    const auto state = oracles::random_state(shape, TTRanks::uniform(3, 3),
                                             1000 + trial, 0.01, 1.0);
    IndexTuple idx(3);
    for (std::size_t d = 0; d < 3; ++d) {
      idx[d] = static_cast<std::int64_t>(
          rng.below(static_cast<std::uint64_t>(shape.dims[d])));
    }
    const auto pm = predictive_moments(state, idx);
    REQUIRE(pm.second_moment - pm.mean * pm.mean >= -1e-10);
  }
}

TEST_CASE("checkpoint round-trip is exact") {
  const auto dir = oracles::make_temp_dir("ckpt");
  auto state = oracles::random_state(TensorShape{{4, 2, 3}},
                                     TTRanks::uniform(3, 2), 61, 0.01, 2.0);
  state.noise = NoisePosterior{12.501, 3.75};
  state.batches_seen = 7;
  state.variance_clamps = 2;

  const auto path = (dir / "m.ckpt").string();
  checkpoint_save(state, path);
  const ModelState back = checkpoint_load(path);
  REQUIRE(states_equal(state, back));
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint rejects corrupt and mismatched files") {
  const auto dir = oracles::make_temp_dir("ckpt");
  const auto state = oracles::random_state(TensorShape{{3, 3}},
                                           TTRanks::uniform(2, 2), 62, 0.1, 1.0);
  const auto good = (dir / "good.ckpt").string();
  checkpoint_save(state, good);
  const std::string bytes = oracles::read_file_bytes(good);

  auto write_bytes = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary);
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    return (dir / name).string();
  };

  // truncation at several depths
  for (std::size_t keep : {std::size_t{4}, std::size_t{30}, bytes.size() - 9}) {
    const auto p = write_bytes("trunc.ckpt", bytes.substr(0, keep));
    REQUIRE_THROWS_AS(checkpoint_load(p), std::runtime_error);
  }

  std::string wrong_magic = bytes;
  wrong_magic[0] = 'X';
  REQUIRE_THROWS_WITH(checkpoint_load(write_bytes("magic.ckpt", wrong_magic)),
                      Catch::Matchers::ContainsSubstring("not a checkpoint"));

  std::string wrong_version = bytes;
  wrong_version[8] = 99;  // version field follows the 8-byte magic
  REQUIRE_THROWS_WITH(checkpoint_load(write_bytes("ver.ckpt", wrong_version)),
                      Catch::Matchers::ContainsSubstring("version"));

  // header declaring a different shape no longer matches the payload
  std::string wrong_shape = bytes;
  wrong_shape[12] = 5;  // tensor order field
  REQUIRE_THROWS_AS(checkpoint_load(write_bytes("shape.ckpt", wrong_shape)),
                    std::runtime_error);

  std::string trailing = bytes + "junk";
  REQUIRE_THROWS_WITH(checkpoint_load(write_bytes("trail.ckpt", trailing)),
                      Catch::Matchers::ContainsSubstring("trailing"));

  REQUIRE_THROWS_AS(checkpoint_load((dir / "absent.ckpt").string()),
                    std::runtime_error);
  std::filesystem::remove_all(dir);
}
