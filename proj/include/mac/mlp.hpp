#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "mac/error.hpp"
#include "mac/matrix.hpp"
#include "mac/rng.hpp"

namespace mac {

inline constexpr std::size_t kTrunkWidth = 200;
inline constexpr std::size_t kResidualWidth = 600;

enum class HeadActivation : std::uint8_t { none = 0, sigmoid = 1 };

struct DenseLayer {
  Matrix w;  // in x out
  Matrix b;  // 1 x out
};

// The f/g network: two 200-wide ReLU trunk layers, a 200->600 ReLU
// projection, a residual block of two 600-wide ReLU layers whose output is
// summed with the block input, and a linear head with an optional sigmoid.
struct Mlp {
  std::size_t input_dim = 1;
  std::size_t output_dim = 1;
  HeadActivation head_activation = HeadActivation::none;
  DenseLayer trunk1;  // input_dim -> 200, ReLU
  DenseLayer trunk2;  // 200 -> 200, ReLU
  DenseLayer proj;    // 200 -> 600, ReLU
  DenseLayer res1;    // 600 -> 600, ReLU
  DenseLayer res2;    // 600 -> 600, ReLU
  DenseLayer head;    // 600 -> output_dim, head_activation

  // Fixed traversal order; AdamState moments and MlpGrads follow it.
  template <typename Fn>
  void for_each_layer(Fn&& fn) {
    fn(trunk1);
    fn(trunk2);
    fn(proj);
    fn(res1);
    fn(res2);
    fn(head);
  }

  template <typename Fn>
  void for_each_layer(Fn&& fn) const {
    fn(trunk1);
    fn(trunk2);
    fn(proj);
    fn(res1);
    fn(res2);
    fn(head);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_layer([&](const DenseLayer& l) { n += l.w.size() + l.b.size(); });
    return n;
  }
};

// ReLU-scaled uniform initialization: weights uniform on +-sqrt(6/fan_in)
// (standard deviation sqrt(2/fan_in)), biases zero, fully seed-determined.
inline Mlp make_mlp(std::size_t input_dim, std::size_t output_dim, HeadActivation head_activation,
                    std::uint64_t seed) {
  if (input_dim == 0 || output_dim == 0) {
    throw ConfigError("make_mlp: dimensions must be positive");
  }
  Mlp net;
  net.input_dim = input_dim;
  net.output_dim = output_dim;
  net.head_activation = head_activation;
  Rng rng(seed);
  const auto init_layer = [&rng](DenseLayer& layer, std::size_t in, std::size_t out) {
    layer.w = Matrix(in, out);
    layer.b = Matrix(1, out);
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    for (auto& v : layer.w.data) v = rng.uniform(-bound, bound);
  };
  init_layer(net.trunk1, input_dim, kTrunkWidth);
  init_layer(net.trunk2, kTrunkWidth, kTrunkWidth);
  init_layer(net.proj, kTrunkWidth, kResidualWidth);
  init_layer(net.res1, kResidualWidth, kResidualWidth);
  init_layer(net.res2, kResidualWidth, kResidualWidth);
  init_layer(net.head, kResidualWidth, net.output_dim);
  return net;
}

// Post-activation values of one forward pass; backward() reads the ReLU
// masks straight from these (output > 0 iff the unit was active, with the
// exactly-zero case counted as inactive).
struct MlpForwardCache {
  Matrix x;   // batch x input_dim
  Matrix h1;  // batch x 200
  Matrix h2;  // batch x 200
  Matrix p;   // batch x 600, residual block input
  Matrix r1;  // batch x 600
  Matrix r2;  // batch x 600
  Matrix s;   // batch x 600, p + r2
  Matrix y;   // batch x output_dim
};

namespace detail {

inline Matrix dense_relu(const Matrix& in, const DenseLayer& layer) {
  Matrix out = matmul(in, layer.w);
  const double* b = layer.b.data.data();
  for (std::size_t i = 0; i < out.rows; ++i) {
    double* row = out.row_ptr(i);
    for (std::size_t j = 0; j < out.cols; ++j) row[j] = std::max(0.0, row[j] + b[j]);
  }
  return out;
}

// upstream masked by the activation pattern: zero wherever the unit output
// was zero (ReLU subgradient at 0 is 0).
inline Matrix relu_backprop(const Matrix& upstream, const Matrix& activation) {
  Matrix out(upstream.rows, upstream.cols);
  for (std::size_t t = 0; t < out.data.size(); ++t) {
    out.data[t] = activation.data[t] > 0.0 ? upstream.data[t] : 0.0;
  }
  return out;
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  for (std::size_t t = 0; t < a.data.size(); ++t) a.data[t] += b.data[t];
}

}  // namespace detail

inline void forward_into(const Mlp& net, const Matrix& x, MlpForwardCache& cache) {
  if (x.cols != net.input_dim) {
    throw ShapeError("forward: input is " + shape_string(x) + ", expected cols " +
                     std::to_string(net.input_dim));
  }
  cache.x = x;
  cache.h1 = detail::dense_relu(cache.x, net.trunk1);
  cache.h2 = detail::dense_relu(cache.h1, net.trunk2);
  cache.p = detail::dense_relu(cache.h2, net.proj);
  cache.r1 = detail::dense_relu(cache.p, net.res1);
  cache.r2 = detail::dense_relu(cache.r1, net.res2);
  cache.s = elementwise(ElementwiseOp::add, cache.p, cache.r2);
  cache.y = matmul(cache.s, net.head.w);
  const double* b = net.head.b.data.data();
  const bool sig = net.head_activation == HeadActivation::sigmoid;
  for (std::size_t i = 0; i < cache.y.rows; ++i) {
    double* row = cache.y.row_ptr(i);
    for (std::size_t j = 0; j < cache.y.cols; ++j) {
      const double v = row[j] + b[j];
      row[j] = sig ? stable_sigmoid(v) : v;
    }
  }
}

inline Matrix forward(const Mlp& net, const Matrix& x) {
  MlpForwardCache cache;
  forward_into(net, x, cache);
  return std::move(cache.y);
}

struct MlpGrads {
  DenseLayer trunk1, trunk2, proj, res1, res2, head;
  Matrix input;  // batch x input_dim; empty unless requested

  template <typename Fn>
  void for_each_layer(Fn&& fn) {
    fn(trunk1);
    fn(trunk2);
    fn(proj);
    fn(res1);
    fn(res2);
    fn(head);
  }

  template <typename Fn>
  void for_each_layer(Fn&& fn) const {
    fn(trunk1);
    fn(trunk2);
    fn(proj);
    fn(res1);
    fn(res2);
    fn(head);
  }
};

// Reverse-mode gradients for every parameter, reusing the forward cache.
inline MlpGrads backward_from_cache(const Mlp& net, const MlpForwardCache& cache,
                                    const Matrix& upstream, bool want_input_grad = true) {
  if (!upstream.same_shape(cache.y)) {
    throw ShapeError("backward: upstream is " + shape_string(upstream) + ", output is " +
                     shape_string(cache.y));
  }
  MlpGrads g;
  Matrix d = upstream;
  if (net.head_activation == HeadActivation::sigmoid) {
    for (std::size_t t = 0; t < d.data.size(); ++t) {
      const double y = cache.y.data[t];
      d.data[t] *= y * (1.0 - y);
    }
  }
  g.head.w = matmul_at_b(cache.s, d);
  g.head.b = col_sums(d);
  const Matrix ds = matmul(d, transpose(net.head.w));

  // Residual block: ds reaches r2 directly and p through the skip.
  const Matrix da = detail::relu_backprop(ds, cache.r2);
  g.res2.w = matmul_at_b(cache.r1, da);
  g.res2.b = col_sums(da);
  const Matrix dr1 = matmul(da, transpose(net.res2.w));

  const Matrix db = detail::relu_backprop(dr1, cache.r1);
  g.res1.w = matmul_at_b(cache.p, db);
  g.res1.b = col_sums(db);
  Matrix dp = matmul(db, transpose(net.res1.w));
  detail::add_inplace(dp, ds);

  const Matrix dc = detail::relu_backprop(dp, cache.p);
  g.proj.w = matmul_at_b(cache.h2, dc);
  g.proj.b = col_sums(dc);
  const Matrix dh2 = matmul(dc, transpose(net.proj.w));

  const Matrix dd = detail::relu_backprop(dh2, cache.h2);
  g.trunk2.w = matmul_at_b(cache.h1, dd);
  g.trunk2.b = col_sums(dd);
  const Matrix dh1 = matmul(dd, transpose(net.trunk2.w));

  const Matrix de = detail::relu_backprop(dh1, cache.h1);
  g.trunk1.w = matmul_at_b(cache.x, de);
  g.trunk1.b = col_sums(de);
  if (want_input_grad) {
    g.input = matmul(de, transpose(net.trunk1.w));
  }
  return g;
}

inline MlpGrads backward(const Mlp& net, const Matrix& x, const Matrix& upstream,
                         bool want_input_grad = true) {
  MlpForwardCache cache;
  forward_into(net, x, cache);
  return backward_from_cache(net, cache, upstream, want_input_grad);
}

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step_count = 0;
  std::vector<Matrix> first_moment;   // one per layer: w then b
  std::vector<Matrix> second_moment;

  explicit AdamState(const Mlp& net, AdamConfig cfg = {}) : config(cfg) {
    net.for_each_layer([&](const DenseLayer& l) {
      first_moment.emplace_back(l.w.rows, l.w.cols);
      first_moment.emplace_back(l.b.rows, l.b.cols);
      second_moment.emplace_back(l.w.rows, l.w.cols);
      second_moment.emplace_back(l.b.rows, l.b.cols);
    });
  }
};

// One Adam update with bias correction over all parameters of the net.
inline void adam_step(Mlp& net, const MlpGrads& grads, AdamState& state) {
  std::vector<Matrix*> params;
  net.for_each_layer([&](DenseLayer& l) {
    params.push_back(&l.w);
    params.push_back(&l.b);
  });
  std::vector<const Matrix*> gs;
  grads.for_each_layer([&](const DenseLayer& l) {
    gs.push_back(&l.w);
    gs.push_back(&l.b);
  });
  if (params.size() != state.first_moment.size()) {
    throw ShapeError("adam_step: state does not match network layout");
  }
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(state.config.beta1, t);
  const double c2 = 1.0 - std::pow(state.config.beta2, t);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Matrix& param = *params[p];
    const Matrix& grad = *gs[p];
    Matrix& m = state.first_moment[p];
    Matrix& v = state.second_moment[p];
    if (!param.same_shape(grad) || !param.same_shape(m)) {
      throw ShapeError("adam_step: gradient shape " + shape_string(grad) +
                       " does not match parameter shape " + shape_string(param));
    }
    const double b1 = state.config.beta1;
    const double b2 = state.config.beta2;
    const double lr = state.config.learning_rate;
    const double eps = state.config.epsilon;
    for (std::size_t i = 0; i < param.data.size(); ++i) {
      const double gi = grad.data[i];
      m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
      v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
      const double m_hat = m.data[i] / c1;
      const double v_hat = v.data[i] / c2;
      param.data[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Serialization: little-endian binary blob with magic, version, dims, head
// activation and the raw row-major parameter arrays. Round-trip is bit-exact.

inline constexpr std::uint32_t kMlpMagic = 0x504c4d4dU;  // "MMLP" little-endian
inline constexpr std::uint32_t kMlpFormatVersion = 1;
inline constexpr std::uint64_t kMaxSerializedDim = 1ULL << 24;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct ByteReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > size) throw ParseError("model blob truncated at byte " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return data[pos++];
  }
};

inline void put_matrix(std::vector<std::uint8_t>& out, const Matrix& m) {
  put_u64(out, m.rows);
  put_u64(out, m.cols);
  for (double v : m.data) put_f64(out, v);
}

inline Matrix read_matrix(ByteReader& r) {
  const std::uint64_t rows = r.u64();
  const std::uint64_t cols = r.u64();
  if (rows > kMaxSerializedDim || cols > kMaxSerializedDim) {
    throw ParseError("model blob declares implausible matrix shape " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  r.need(static_cast<std::size_t>(rows * cols) * 8);
  Matrix m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
  for (auto& v : m.data) v = r.f64();
  return m;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize(const Mlp& net) {
  std::vector<std::uint8_t> out;
  out.reserve(64 + net.parameter_count() * 8);
  detail::put_u32(out, kMlpMagic);
  detail::put_u32(out, kMlpFormatVersion);
  detail::put_u64(out, net.input_dim);
  detail::put_u64(out, net.output_dim);
  out.push_back(static_cast<std::uint8_t>(net.head_activation));
  net.for_each_layer([&](const DenseLayer& l) {
    detail::put_matrix(out, l.w);
    detail::put_matrix(out, l.b);
  });
  return out;
}

inline Mlp deserialize_mlp(detail::ByteReader& r) {
  if (r.u32() != kMlpMagic) throw ParseError("not an MLP blob (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kMlpFormatVersion) {
    throw VersionError("unsupported MLP format version " + std::to_string(version) +
                       " (expected " + std::to_string(kMlpFormatVersion) + ")");
  }
  Mlp net;
  net.input_dim = static_cast<std::size_t>(r.u64());
  net.output_dim = static_cast<std::size_t>(r.u64());
  if (net.input_dim == 0 || net.output_dim == 0 || net.input_dim > kMaxSerializedDim ||
      net.output_dim > kMaxSerializedDim) {
    throw ParseError("MLP blob declares invalid dimensions");
  }
  const std::uint8_t act = r.u8();
  if (act > 1) throw ParseError("MLP blob declares unknown head activation");
  net.head_activation = static_cast<HeadActivation>(act);
  net.for_each_layer([&](DenseLayer& l) {
    l.w = detail::read_matrix(r);
    l.b = detail::read_matrix(r);
  });
  const auto check = [](const DenseLayer& l, std::size_t in, std::size_t out, const char* name) {
    if (l.w.rows != in || l.w.cols != out || l.b.rows != 1 || l.b.cols != out) {
      throw ParseError(std::string("MLP blob layer '") + name + "' has inconsistent dimensions");
    }
    for (double v : l.w.data) {
      if (!std::isfinite(v)) throw ParseError("MLP blob contains a non-finite weight");
    }
    for (double v : l.b.data) {
      if (!std::isfinite(v)) throw ParseError("MLP blob contains a non-finite bias");
    }
  };
  check(net.trunk1, net.input_dim, kTrunkWidth, "trunk1");
  check(net.trunk2, kTrunkWidth, kTrunkWidth, "trunk2");
  check(net.proj, kTrunkWidth, kResidualWidth, "proj");
  check(net.res1, kResidualWidth, kResidualWidth, "res1");
  check(net.res2, kResidualWidth, kResidualWidth, "res2");
  check(net.head, kResidualWidth, net.output_dim, "head");
  return net;
}

inline Mlp deserialize(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r{bytes.data(), bytes.size()};
  Mlp net = deserialize_mlp(r);
  if (r.pos != bytes.size()) {
    throw ParseError("MLP blob has " + std::to_string(bytes.size() - r.pos) + " trailing bytes");
  }
  return net;
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ParseError("short write to '" + path + "'");
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace mac
