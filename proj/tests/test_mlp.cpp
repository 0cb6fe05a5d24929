#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mac/mlp.hpp"
#include "support/fd_check.hpp"
#include "support/oracles.hpp"

namespace {

mac::Matrix gaussian_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  mac::Rng rng(seed);
  mac::Matrix m(rows, cols);
  for (auto& v : m.data) v = rng.gaussian();
  return m;
}

void zero_all(mac::Mlp& net) {
  net.for_each_layer([](mac::DenseLayer& l) {
    for (auto& v : l.w.data) v = 0.0;
    for (auto& v : l.b.data) v = 0.0;
  });
}

mac::MlpGrads zero_grads_like(const mac::Mlp& net) {
  mac::MlpGrads g;
  auto fill = [](mac::DenseLayer& gl, const mac::DenseLayer& nl) {
    gl.w = mac::Matrix(nl.w.rows, nl.w.cols);
    gl.b = mac::Matrix(nl.b.rows, nl.b.cols);
  };
  fill(g.trunk1, net.trunk1);
  fill(g.trunk2, net.trunk2);
  fill(g.proj, net.proj);
  fill(g.res1, net.res1);
  fill(g.res2, net.res2);
  fill(g.head, net.head);
  return g;
}

}  // namespace

TEST_CASE("network shape and parameter count", "[mlp]") {
  const mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::none, 7);
  CHECK(net.parameter_count() == 883001);
  CHECK(net.trunk1.w.rows == 1);
  CHECK(net.trunk1.w.cols == 200);
  CHECK(net.trunk2.w.rows == 200);
  CHECK(net.proj.w.cols == 600);
  CHECK(net.res1.w.rows == 600);
  CHECK(net.res2.w.cols == 600);
  CHECK(net.head.w.rows == 600);
  CHECK(net.head.w.cols == 1);

  const mac::Mlp wide = mac::make_mlp(3, 2, mac::HeadActivation::sigmoid, 7);
  CHECK(wide.trunk1.w.rows == 3);
  CHECK(wide.head.w.cols == 2);
  CHECK_THROWS_AS(mac::make_mlp(0, 1, mac::HeadActivation::none, 7), mac::ConfigError);
}

TEST_CASE("zero weights reduce forward to the head bias", "[mlp]") {
  mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::none, 3);
  zero_all(net);
  net.head.b(0, 0) = 0.7;
  const mac::Matrix x = mac::Matrix::from_rows({{0.1}, {0.5}, {0.9}, {0.33}});
  const mac::Matrix y = mac::forward(net, x);
  REQUIRE(y.rows == 4);
  for (std::size_t m = 0; m < 4; ++m) CHECK(y(m, 0) == 0.7);

  net.head_activation = mac::HeadActivation::sigmoid;
  net.head.b(0, 0) = 0.0;
  const mac::Matrix ys = mac::forward(net, x);
  for (std::size_t m = 0; m < 4; ++m) CHECK(ys(m, 0) == 0.5);
}

TEST_CASE("forward is deterministic and validates shape", "[mlp]") {
  const mac::Mlp net = mac::make_mlp(2, 1, mac::HeadActivation::sigmoid, 42);
  const mac::Matrix x = gaussian_matrix(5, 2, 11);
  const mac::Matrix y1 = mac::forward(net, x);
  const mac::Matrix y2 = mac::forward(net, x);
  REQUIRE(y1.data.size() == y2.data.size());
  for (std::size_t t = 0; t < y1.data.size(); ++t) CHECK(y1.data[t] == y2.data[t]);
  for (double v : y1.data) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK_THROWS_AS(mac::forward(net, gaussian_matrix(5, 3, 11)), mac::ShapeError);
}

TEST_CASE("initialization is seed-determined with the right spread", "[mlp]") {
  const mac::Mlp a = mac::make_mlp(5, 1, mac::HeadActivation::none, 21);
  const mac::Mlp b = mac::make_mlp(5, 1, mac::HeadActivation::none, 21);
  const mac::Mlp c = mac::make_mlp(5, 1, mac::HeadActivation::none, 22);
  bool identical = true;
  bool differs = false;
  for (std::size_t t = 0; t < a.trunk1.w.data.size(); ++t) {
    identical = identical && a.trunk1.w.data[t] == b.trunk1.w.data[t];
    differs = differs || a.trunk1.w.data[t] != c.trunk1.w.data[t];
  }
  CHECK(identical);
  CHECK(differs);

  const double bound = std::sqrt(6.0 / 5.0);
  double mean = 0.0;
  for (double v : a.trunk1.w.data) {
    CHECK(std::fabs(v) <= bound);
    mean += v;
  }
  const std::size_t n = a.trunk1.w.data.size();
  mean /= static_cast<double>(n);
  const double se = bound / std::sqrt(3.0) / std::sqrt(static_cast<double>(n));
  CHECK(std::fabs(mean) < 5.0 * se);

  a.for_each_layer([](const mac::DenseLayer& l) {
    for (double v : l.b.data) CHECK(v == 0.0);
  });
}

TEST_CASE("zero upstream gradient zeroes every parameter gradient", "[mlp]") {
  const mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::sigmoid, 5);
  const mac::Matrix x = mac::Matrix::from_rows({{0.2}, {0.6}, {0.9}});
  const mac::Matrix upstream(3, 1);
  const mac::MlpGrads g = mac::backward(net, x, upstream, true);
  g.for_each_layer([](const mac::DenseLayer& l) {
    for (double v : l.w.data) CHECK(v == 0.0);
    for (double v : l.b.data) CHECK(v == 0.0);
  });
  for (double v : g.input.data) CHECK(v == 0.0);
}

TEST_CASE("relu at exactly zero uses subgradient zero", "[mlp]") {
  mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::none, 17);
  // Unit 3 of trunk1 gets pre-activation 0.5 * 0.4 - 0.2 == 0 exactly.
  net.trunk1.w(0, 3) = 0.4;
  net.trunk1.b(0, 3) = -0.2;
  const mac::Matrix x = mac::Matrix::from_rows({{0.5}});
  const mac::Matrix upstream = mac::Matrix::from_rows({{1.0}});
  const mac::MlpGrads g = mac::backward(net, x, upstream, false);
  CHECK(g.trunk1.w(0, 3) == 0.0);
  CHECK(g.trunk1.b(0, 3) == 0.0);

  // Nudging the unit into the active region makes the same gradients nonzero.
  net.trunk1.b(0, 3) = -0.2 + 1e-3;
  const mac::MlpGrads g2 = mac::backward(net, x, upstream, false);
  CHECK(g2.trunk1.b(0, 3) != 0.0);
  CHECK(g2.trunk1.w(0, 3) != 0.0);
}

TEST_CASE("backward rejects mismatched upstream shape", "[mlp]") {
  const mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::none, 5);
  const mac::Matrix x = mac::Matrix::from_rows({{0.2}, {0.6}});
  CHECK_THROWS_AS(mac::backward(net, x, mac::Matrix(3, 1), false), mac::ShapeError);
}

TEST_CASE("parameter gradients match central finite differences", "[mlp]") {
  fdcheck::FdOptions opt;
  opt.max_params_per_layer = 420;
  opt.crosscheck_probes = 48;

  SECTION("identity head on unit-interval inputs") {
    const mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::none, 2024);
    const mac::Matrix x = mac::Matrix::from_rows({{0.12}, {0.55}, {0.87}});
    const mac::Matrix upstream = gaussian_matrix(3, 1, 501);
    const fdcheck::FdReport rep = fdcheck::check_parameter_gradients(net, x, upstream, opt);
    INFO("worst " << rep.worst_param << " analytic " << rep.worst_analytic << " fd "
                  << rep.worst_fd);
    CHECK(rep.failures == 0);
    CHECK(rep.max_rel_error < 1e-4);
    CHECK(rep.kink_straddles == 0);
    CHECK(rep.crosschecked > 0);
    CHECK(rep.max_crosscheck_diff < 1e-7);
  }

  SECTION("sigmoid head on latent inputs") {
    const mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::sigmoid, 2027);
    const mac::Matrix x = gaussian_matrix(3, 1, 502);
    const mac::Matrix upstream = gaussian_matrix(3, 1, 503);
    const fdcheck::FdReport rep = fdcheck::check_parameter_gradients(net, x, upstream, opt);
    INFO("worst " << rep.worst_param << " analytic " << rep.worst_analytic << " fd "
                  << rep.worst_fd);
    CHECK(rep.failures == 0);
    CHECK(rep.max_rel_error < 1e-4);
    CHECK(rep.kink_straddles == 0);
    CHECK(rep.max_crosscheck_diff < 1e-7);
  }
}

TEST_CASE("input gradients match central finite differences", "[mlp]") {
  const mac::Mlp net = mac::make_mlp(2, 1, mac::HeadActivation::sigmoid, 31);
  const mac::Matrix x = gaussian_matrix(3, 2, 77);
  const mac::Matrix upstream = gaussian_matrix(3, 1, 78);
  CHECK(fdcheck::max_input_grad_rel_error(net, x, upstream) < 1e-4);
}

TEST_CASE("adam first step matches the hand-computed value", "[mlp]") {
  mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::none, 9);
  zero_all(net);
  mac::MlpGrads grads = zero_grads_like(net);
  grads.head.b(0, 0) = 2.0;
  mac::AdamState state(net);
  adam_step(net, grads, state);
  CHECK(state.step_count == 1);
  CHECK_THAT(net.head.b(0, 0), Catch::Matchers::WithinAbs(-0.000999999995, 1e-12));
  // Parameters with zero gradient stay exactly put.
  CHECK(net.trunk1.w(0, 0) == 0.0);
  CHECK(net.head.w(0, 0) == 0.0);
}

TEST_CASE("adam matches a scalar oracle over consecutive steps", "[mlp]") {
  mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::none, 40);
  mac::MlpGrads grads = zero_grads_like(net);
  grads.head.w(0, 0) = 2.0;
  grads.head.b(0, 0) = -0.3;
  grads.trunk1.w(0, 5) = 1e-4;
  mac::AdamState state(net);

  oracle::AdamScalar o1, o2, o3;
  double p1 = net.head.w(0, 0);
  double p2 = net.head.b(0, 0);
  double p3 = net.trunk1.w(0, 5);
  for (int step = 0; step < 2; ++step) {
    adam_step(net, grads, state);
    p1 = o1.step(p1, 2.0);
    p2 = o2.step(p2, -0.3);
    p3 = o3.step(p3, 1e-4);
  }
  CHECK(state.step_count == 2);
  CHECK_THAT(net.head.w(0, 0), Catch::Matchers::WithinAbs(p1, 1e-15));
  CHECK_THAT(net.head.b(0, 0), Catch::Matchers::WithinAbs(p2, 1e-15));
  CHECK_THAT(net.trunk1.w(0, 5), Catch::Matchers::WithinAbs(p3, 1e-15));
}

TEST_CASE("adam with zero gradients leaves parameters bit-identical", "[mlp]") {
  mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::sigmoid, 13);
  const std::vector<std::uint8_t> before = mac::serialize(net);
  mac::AdamState state(net);
  const mac::MlpGrads grads = zero_grads_like(net);
  adam_step(net, grads, state);
  CHECK(state.step_count == 1);
  CHECK(mac::serialize(net) == before);
}

TEST_CASE("adam rejects a state built for a different network", "[mlp]") {
  mac::Mlp small = mac::make_mlp(1, 1, mac::HeadActivation::none, 1);
  const mac::Mlp big = mac::make_mlp(4, 1, mac::HeadActivation::none, 1);
  mac::AdamState state(big);
  const mac::MlpGrads grads = zero_grads_like(small);
  CHECK_THROWS_AS(adam_step(small, grads, state), mac::ShapeError);
}

TEST_CASE("serialization round-trips bit-exactly", "[mlp]") {
  const mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::sigmoid, 99);
  const std::vector<std::uint8_t> bytes = mac::serialize(net);
  const mac::Mlp back = mac::deserialize(bytes);
  CHECK(back.input_dim == 1);
  CHECK(back.head_activation == mac::HeadActivation::sigmoid);
  CHECK(mac::serialize(back) == bytes);

  const mac::Matrix x = gaussian_matrix(4, 1, 12);
  const mac::Matrix y1 = mac::forward(net, x);
  const mac::Matrix y2 = mac::forward(back, x);
  for (std::size_t t = 0; t < y1.data.size(); ++t) CHECK(y1.data[t] == y2.data[t]);
}

TEST_CASE("deserialization rejects malformed blobs", "[mlp]") {
  const mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::none, 55);
  std::vector<std::uint8_t> bytes = mac::serialize(net);

  SECTION("truncated payload") {
    bytes.resize(bytes.size() / 2);
    CHECK_THROWS_AS(mac::deserialize(bytes), mac::ParseError);
  }
  SECTION("bad magic") {
    bytes[0] ^= 0xff;
    CHECK_THROWS_AS(mac::deserialize(bytes), mac::ParseError);
  }
  SECTION("unsupported version") {
    bytes[4] = 9;
    CHECK_THROWS_AS(mac::deserialize(bytes), mac::VersionError);
  }
  SECTION("corrupted matrix length field") {
    // First matrix header starts after magic, version, dims and head byte.
    const std::size_t off = 4 + 4 + 8 + 8 + 1;
    for (int i = 0; i < 8; ++i) bytes[off + i] = 0xff;
    CHECK_THROWS_AS(mac::deserialize(bytes), mac::ParseError);
  }
  SECTION("trailing bytes") {
    bytes.push_back(0);
    CHECK_THROWS_AS(mac::deserialize(bytes), mac::ParseError);
  }
  SECTION("non-finite parameter") {
    mac::Mlp bad = net;
    bad.trunk1.w(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(mac::deserialize(mac::serialize(bad)), mac::ParseError);
  }
  SECTION("empty blob") {
    CHECK_THROWS_AS(mac::deserialize({}), mac::ParseError);
  }
}

TEST_CASE("model files round-trip through disk", "[mlp]") {
  const auto path = (std::filesystem::temp_directory_path() / "mac_mlp_roundtrip.macm").string();
  const mac::Mlp net = mac::make_mlp(1, 1, mac::HeadActivation::none, 123);
  mac::write_bytes(path, mac::serialize(net));
  const mac::Mlp back = mac::deserialize(mac::read_bytes(path));
  CHECK(mac::serialize(back) == mac::serialize(net));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(mac::read_bytes(path), mac::ParseError);
}
