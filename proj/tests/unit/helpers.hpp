#pragma once

// Independent reference computations used as test oracles. Nothing here
// calls into the divergence or oracle modules.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dlm2/lm.hpp"
#include "dlm2/tensor.hpp"

namespace testing {

inline double direct_kl(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

inline std::vector<double> mix(const std::vector<double>& a, const std::vector<double>& b, double w) {
  std::vector<double> m(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) m[i] = w * a[i] + (1.0 - w) * b[i];
  return m;
}

inline std::vector<double> random_row(std::size_t n, std::mt19937_64& eng) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> r(n);
  double s = 0.0;
  for (auto& x : r) s += (x = u(eng));
  for (auto& x : r) x /= s;
  return r;
}

// Largest relative error between the tape gradient and central differences
// of `loss` with respect to every entry of `params`.
inline double grad_error(const std::function<dlm2::Tensor(dlm2::Graph&)>& loss,
                         std::vector<dlm2::Tensor> params, double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  {
    dlm2::Graph g;
    g.backward(loss(g));
  }
  double worst = 0.0;
  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto v = p.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double keep = v[i];
      v[i] = keep + h;
      dlm2::Graph gp(false);
      const double up = loss(gp).item();
      v[i] = keep - h;
      dlm2::Graph gm(false);
      const double down = loss(gm).item();
      v[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

// Table rows for an order-1 model in which the row after context token c is
// rows_by_token[c].
inline dlm2::TabularLM bigram(const std::vector<std::vector<double>>& rows_by_token, std::size_t max_len) {
  const std::size_t v = rows_by_token.size();
  const auto shape = dlm2::TabularLM::uniform(v, 1, max_len);
  std::vector<std::vector<double>> rows(dlm2::TabularLM::context_count(v, 1), std::vector<double>(v, 1.0 / v));
  for (std::size_t c = 0; c < v; ++c) {
    const dlm2::TokenId tok = static_cast<dlm2::TokenId>(c);
    rows[shape.context_index(std::span<const dlm2::TokenId>(&tok, 1))] = rows_by_token[c];
  }
  return dlm2::TabularLM(v, 1, max_len, rows);
}

}  // namespace testing
