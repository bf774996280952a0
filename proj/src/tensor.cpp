#include "dlm2/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dlm2/error.hpp"

namespace dlm2 {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_size(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  check_finite(values, "tensor construction");
  auto s = std::make_shared<Storage>();
  s->shape = std::move(shape);
  s->values = std::move(values);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

const Shape& Tensor::shape() const { return data_->shape; }
std::size_t Tensor::size() const { return data_->values.size(); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() >= 2 ? s[s.size() - 2] : 1;
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

std::span<const double> Tensor::values() const { return data_->values; }
std::span<double> Tensor::mutable_values() { return data_->values; }

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
  return data_->values[0];
}

bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { data_->requires_grad = flag; }
bool Tensor::has_grad() const { return data_ && !data_->grad.empty(); }
std::span<const double> Tensor::grad() const { return data_->grad; }

std::span<double> Tensor::mutable_grad() const {
  if (data_->grad.size() != data_->values.size()) data_->grad.assign(data_->values.size(), 0.0);
  return data_->grad;
}

void Tensor::zero_grad() {
  if (data_) std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const {
  return from(shape(), data_->values, requires_grad);
}

// ---------------------------------------------------------------------------
// Graph plumbing

Tensor Graph::make_output(Shape shape, std::vector<double> values,
                          std::initializer_list<Tensor> inputs, const char* op_name) {
  check_finite(values, op_name);
  bool needs_grad = false;
  if (record_) {
    for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
  }
  Tensor out = Tensor::from(std::move(shape), std::move(values), needs_grad);
  out.data_->leaf = false;
  return out;
}

void Graph::record(std::vector<Tensor> inputs, const Tensor& output,
                   std::function<void()> backward) {
  ops_.push_back(Op{std::move(inputs), output, std::move(backward)});
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) return;

  for (auto& op : ops_) {
    auto g = op.output.mutable_grad();
    std::fill(g.begin(), g.end(), 0.0);
    for (auto& in : op.inputs) {
      if (in.requires_grad()) in.mutable_grad();
    }
  }
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;

  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    it->backward();
    for (auto& in : it->inputs) {
      if (in.requires_grad()) check_finite(in.grad(), "backward");
    }
  }
}

namespace {

enum class Broadcast { None, Left, Right };

Broadcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::None;
  if (a.rank() == 0) return Broadcast::Left;
  if (b.rank() == 0) return Broadcast::Right;
  throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()) + " differ");
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " +
                         shape_string(t.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  auto mode = broadcast_mode(a, b, "add");
  const Tensor& big = mode == Broadcast::Left ? b : a;
  const std::size_t n = big.size();
  std::vector<double> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = av[mode == Broadcast::Left ? 0 : i] + bv[mode == Broadcast::Right ? 0 : i];
  }
  Tensor y = make_output(big.shape(), std::move(out), {a, b}, "add");
  if (y.requires_grad()) {
    record({a, b}, y, [a, b, y, mode, n]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) ga[mode == Broadcast::Left ? 0 : i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) gb[mode == Broadcast::Right ? 0 : i] += gy[i];
      }
    });
  }
  return y;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  auto mode = broadcast_mode(a, b, "sub");
  const Tensor& big = mode == Broadcast::Left ? b : a;
  const std::size_t n = big.size();
  std::vector<double> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = av[mode == Broadcast::Left ? 0 : i] - bv[mode == Broadcast::Right ? 0 : i];
  }
  Tensor y = make_output(big.shape(), std::move(out), {a, b}, "sub");
  if (y.requires_grad()) {
    record({a, b}, y, [a, b, y, mode, n]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) ga[mode == Broadcast::Left ? 0 : i] += gy[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) gb[mode == Broadcast::Right ? 0 : i] -= gy[i];
      }
    });
  }
  return y;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  auto mode = broadcast_mode(a, b, "mul");
  const Tensor& big = mode == Broadcast::Left ? b : a;
  const std::size_t n = big.size();
  std::vector<double> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = av[mode == Broadcast::Left ? 0 : i] * bv[mode == Broadcast::Right ? 0 : i];
  }
  Tensor y = make_output(big.shape(), std::move(out), {a, b}, "mul");
  if (y.requires_grad()) {
    record({a, b}, y, [a, b, y, mode, n]() mutable {
      auto gy = y.grad();
      auto av = a.values();
      auto bv = b.values();
      const bool la = mode == Broadcast::Left;
      const bool rb = mode == Broadcast::Right;
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) ga[la ? 0 : i] += gy[i] * bv[rb ? 0 : i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < n; ++i) gb[rb ? 0 : i] += gy[i] * av[la ? 0 : i];
      }
    });
  }
  return y;
}

Tensor Graph::scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  Tensor y = make_output(a.shape(), std::move(out), {a}, "scale");
  if (y.requires_grad()) {
    record({a}, y, [a, y, factor]() mutable {
      auto gy = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += factor * gy[i];
    });
  }
  return y;
}

Tensor Graph::add_scalar(const Tensor& a, double offset) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v += offset;
  Tensor y = make_output(a.shape(), std::move(out), {a}, "add_scalar");
  if (y.requires_grad()) {
    record({a}, y, [a, y]() mutable {
      auto gy = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
    });
  }
  return y;
}

Tensor Graph::log(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (!(av[i] > 0.0)) throw NumericError("log of non-positive value");
    out[i] = std::log(av[i]);
  }
  Tensor y = make_output(a.shape(), std::move(out), {a}, "log");
  if (y.requires_grad()) {
    record({a}, y, [a, y]() mutable {
      auto gy = y.grad();
      auto av = a.values();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] / av[i];
    });
  }
  return y;
}

Tensor Graph::exp(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  Tensor y = make_output(a.shape(), std::move(out), {a}, "exp");
  if (y.requires_grad()) {
    record({a}, y, [a, y]() mutable {
      auto gy = y.grad();
      auto yv = y.values();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * yv[i];
    });
  }
  return y;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;
}  // namespace

Tensor Graph::gelu(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluK * x * x * x)));
  }
  Tensor y = make_output(a.shape(), std::move(out), {a}, "gelu");
  if (y.requires_grad()) {
    record({a}, y, [a, y]() mutable {
      auto gy = y.grad();
      auto av = a.values();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        const double x = av[i];
        const double t = std::tanh(kGeluC * (x + kGeluK * x * x * x));
        const double d = 0.5 * (1.0 + t) +
                         0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * x * x);
        ga[i] += gy[i] * d;
      }
    });
  }
  return y;
}

Tensor Graph::log_add_exp(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("log_add_exp: shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double hi = std::max(av[i], bv[i]);
    out[i] = hi + std::log1p(std::exp(-std::abs(av[i] - bv[i])));
  }
  Tensor y = make_output(a.shape(), std::move(out), {a, b}, "log_add_exp");
  if (y.requires_grad()) {
    record({a, b}, y, [a, b, y]() mutable {
      auto gy = y.grad();
      auto yv = y.values();
      if (a.requires_grad()) {
        auto av = a.values();
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * std::exp(av[i] - yv[i]);
      }
      if (b.requires_grad()) {
        auto bv = b.values();
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * std::exp(bv[i] - yv[i]);
      }
    });
  }
  return y;
}

Tensor Graph::log_sigmoid(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = std::min(av[i], 0.0) - std::log1p(std::exp(-std::abs(av[i])));
  }
  Tensor y = make_output(a.shape(), std::move(out), {a}, "log_sigmoid");
  if (y.requires_grad()) {
    record({a}, y, [a, y]() mutable {
      auto gy = y.grad();
      auto av = a.values();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) {
        // d/dx log sigmoid(x) = sigmoid(-x)
        const double x = av[i];
        const double s = x >= 0.0 ? std::exp(-x) / (1.0 + std::exp(-x)) : 1.0 / (1.0 + std::exp(x));
        ga[i] += gy[i] * s;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor Graph::sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  Tensor y = make_output({}, {total}, {a}, "sum");
  if (y.requires_grad()) {
    record({a}, y, [a, y]() mutable {
      const double g = y.grad()[0];
      for (auto& v : a.mutable_grad()) v += g;
    });
  }
  return y;
}

Tensor Graph::mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor Graph::sum_rows(const Tensor& a) {
  require_rank2(a, "sum_rows");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  auto av = a.values();
  std::vector<double> out(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += av[i * n + j];
    out[i] = s;
  }
  Tensor y = make_output({m}, std::move(out), {a}, "sum_rows");
  if (y.requires_grad()) {
    record({a}, y, [a, y, m, n]() mutable {
      auto gy = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += gy[i];
    });
  }
  return y;
}

Tensor Graph::segment_sum(const Tensor& a, std::span<const std::size_t> lengths) {
  const std::size_t total = std::accumulate(lengths.begin(), lengths.end(), std::size_t{0});
  if (total != a.size()) {
    throw DimensionError("segment_sum: segment lengths cover " + std::to_string(total) +
                         " of " + std::to_string(a.size()) + " values");
  }
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  auto av = a.values();
  std::vector<double> out(lens.size(), 0.0);
  std::size_t pos = 0;
  for (std::size_t s = 0; s < lens.size(); ++s) {
    for (std::size_t k = 0; k < lens[s]; ++k) out[s] += av[pos++];
  }
  Tensor y = make_output({lens.size()}, std::move(out), {a}, "segment_sum");
  if (y.requires_grad()) {
    record({a}, y, [a, y, lens]() mutable {
      auto gy = y.grad();
      auto ga = a.mutable_grad();
      std::size_t pos = 0;
      for (std::size_t s = 0; s < lens.size(); ++s) {
        for (std::size_t k = 0; k < lens[s]; ++k) ga[pos++] += gy[s];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  Tensor y = make_output({m, n}, std::move(out), {a, b}, "matmul");
  if (y.requires_grad()) {
    record({a, b}, y, [a, b, y, m, k, n]() mutable {
      auto gy = y.grad();
      if (a.requires_grad()) {
        auto bv = b.values();
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = gy.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = bv.data() + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga[i * k + p] += s;
          }
        }
      }
      if (b.requires_grad()) {
        auto av = a.values();
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = gy.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            double* gbrow = gb.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
          }
        }
      }
    });
  }
  return y;
}

Tensor Graph::matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()) + "^T");
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = av.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = bv.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      out[i * n + j] = s;
    }
  }
  Tensor y = make_output({m, n}, std::move(out), {a, b}, "matmul_nt");
  if (y.requires_grad()) {
    record({a, b}, y, [a, b, y, m, k, n]() mutable {
      auto gy = y.grad();
      auto av = a.values();
      auto bv = b.values();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double g = gy[i * n + j];
            if (g == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * bv[j * k + p];
          }
        }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const double g = gy[i * n + j];
            if (g == 0.0) continue;
            for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += g * av[i * k + p];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalizers

Tensor Graph::log_softmax(const Tensor& a, int axis) {
  if (axis != -1 && axis != static_cast<int>(a.rank()) - 1) {
    throw DimensionError("log_softmax supports the last axis only");
  }
  if (a.rank() == 0 || a.cols() == 0) throw DimensionError("log_softmax over an empty axis");
  const std::size_t n = a.cols();
  const std::size_t m = a.size() / n;
  auto av = a.values();
  check_finite(av, "log_softmax input");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = av.data() + i * n;
    const double hi = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - hi);
    const double lse = hi + std::log(s);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[j] - lse;
  }
  Tensor y = make_output(a.shape(), std::move(out), {a}, "log_softmax");
  if (y.requires_grad()) {
    record({a}, y, [a, y, m, n]() mutable {
      auto gy = y.grad();
      auto yv = y.values();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < m; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += gy[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          ga[i * n + j] += gy[i * n + j] - std::exp(yv[i * n + j]) * gs;
        }
      }
    });
  }
  return y;
}

Tensor Graph::causal_softmax(const Tensor& scores, std::span<const std::size_t> segments) {
  require_rank2(scores, "causal_softmax");
  const std::size_t total = std::accumulate(segments.begin(), segments.end(), std::size_t{0});
  const std::size_t n = scores.cols();
  if (scores.rows() != n || total != n) {
    throw DimensionError("causal_softmax: segments cover " + std::to_string(total) +
                         " rows of a " + shape_string(scores.shape()) + " score matrix");
  }
  // start[i] is the first column row i may attend to.
  std::vector<std::size_t> start(n);
  std::size_t offset = 0;
  for (std::size_t len : segments) {
    for (std::size_t r = 0; r < len; ++r) start[offset + r] = offset;
    offset += len;
  }
  auto sv = scores.values();
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = sv.data() + i * n;
    double hi = x[start[i]];
    for (std::size_t j = start[i]; j <= i; ++j) hi = std::max(hi, x[j]);
    double s = 0.0;
    for (std::size_t j = start[i]; j <= i; ++j) {
      out[i * n + j] = std::exp(x[j] - hi);
      s += out[i * n + j];
    }
    for (std::size_t j = start[i]; j <= i; ++j) out[i * n + j] /= s;
  }
  Tensor y = make_output({n, n}, std::move(out), {scores}, "causal_softmax");
  if (y.requires_grad()) {
    record({scores}, y, [scores, y, start = std::move(start), n]() mutable {
      auto gy = y.grad();
      auto yv = y.values();
      auto ga = scores.mutable_grad();
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = start[i]; j <= i; ++j) dot += yv[i * n + j] * gy[i * n + j];
        for (std::size_t j = start[i]; j <= i; ++j) {
          ga[i * n + j] += yv[i * n + j] * (gy[i * n + j] - dot);
        }
      }
    });
  }
  return y;
}

Tensor Graph::layer_norm(const Tensor& a) {
  constexpr double kEps = 1e-5;
  const std::size_t n = a.cols();
  const std::size_t m = a.size() / n;
  auto av = a.values();
  std::vector<double> out(a.size());
  std::vector<double> inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = av.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kEps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = (x[j] - mu) * inv_std[i];
  }
  Tensor y = make_output(a.shape(), std::move(out), {a}, "layer_norm");
  if (y.requires_grad()) {
    record({a}, y, [a, y, inv_std = std::move(inv_std), m, n]() mutable {
      auto gy = y.grad();
      auto yv = y.values();
      auto ga = a.mutable_grad();
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < m; ++i) {
        double mean_g = 0.0;
        double mean_gy = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          mean_g += gy[i * n + j];
          mean_gy += gy[i * n + j] * yv[i * n + j];
        }
        mean_g *= inv_n;
        mean_gy *= inv_n;
        for (std::size_t j = 0; j < n; ++j) {
          ga[i * n + j] += inv_std[i] * (gy[i * n + j] - mean_g - yv[i * n + j] * mean_gy);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Indexing

Tensor Graph::gather(const Tensor& a, std::span<const std::size_t> indices) {
  require_rank2(a, "gather");
  const std::size_t m = a.rows();
  const std::size_t v = a.cols();
  if (indices.size() != m) {
    throw DimensionError("gather: " + std::to_string(indices.size()) + " indices for " +
                         std::to_string(m) + " rows");
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  auto av = a.values();
  std::vector<double> out(m);
  for (std::size_t t = 0; t < m; ++t) {
    if (idx[t] >= v) {
      throw IndexError("gather: index " + std::to_string(idx[t]) + " out of range for width " +
                       std::to_string(v));
    }
    out[t] = av[t * v + idx[t]];
  }
  Tensor y = make_output({m}, std::move(out), {a}, "gather");
  if (y.requires_grad()) {
    record({a}, y, [a, y, idx = std::move(idx), v]() mutable {
      auto gy = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t t = 0; t < idx.size(); ++t) ga[t * v + idx[t]] += gy[t];
    });
  }
  return y;
}

Tensor Graph::select_rows(const Tensor& a, std::span<const std::size_t> indices) {
  require_rank2(a, "select_rows");
  const std::size_t r = a.rows();
  const std::size_t n = a.cols();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  auto av = a.values();
  std::vector<double> out(idx.size() * n);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= r) {
      throw IndexError("select_rows: row " + std::to_string(idx[k]) + " out of range for " +
                       std::to_string(r) + " rows");
    }
    std::copy_n(av.data() + idx[k] * n, n, out.data() + k * n);
  }
  Tensor y = make_output({idx.size(), n}, std::move(out), {a}, "select_rows");
  if (y.requires_grad()) {
    record({a}, y, [a, y, idx = std::move(idx), n]() mutable {
      auto gy = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t k = 0; k < idx.size(); ++k) {
        for (std::size_t j = 0; j < n; ++j) ga[idx[k] * n + j] += gy[k * n + j];
      }
    });
  }
  return y;
}

Tensor Graph::repeat_rows(const Tensor& a, std::size_t m) {
  if (!(a.rank() == 1 || (a.rank() == 2 && a.rows() == 1))) {
    throw DimensionError("repeat_rows expects a vector, got " + shape_string(a.shape()));
  }
  const std::size_t n = a.cols();
  auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(av.data(), n, out.data() + i * n);
  Tensor y = make_output({m, n}, std::move(out), {a}, "repeat_rows");
  if (y.requires_grad()) {
    record({a}, y, [a, y, m, n]() mutable {
      auto gy = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[j] += gy[i * n + j];
    });
  }
  return y;
}

Tensor Graph::reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  Tensor y = make_output(std::move(shape), std::move(out), {a}, "reshape");
  if (y.requires_grad()) {
    record({a}, y, [a, y]() mutable {
      auto gy = y.grad();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
    });
  }
  return y;
}

}  // namespace dlm2
