#include <doctest.h>

#include <cmath>

#include "dlm2/error.hpp"
#include "dlm2/oracle.hpp"

using namespace dlm2;

TEST_SUITE("oracle") {
  TEST_CASE("enumerated outcomes carry all the probability mass") {
    const auto m = TabularLM::random(4, 2, 10, 3);
    for (std::size_t len : {1, 2, 4}) {
      double total = 0.0;
      for (const auto& y : enumerate_responses(4, len)) total += sequence_prob(m, {0, 2}, y);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("enumeration respects its budget") {
    CHECK_THROWS_AS(enumerate_responses(8, 3), BudgetError);
    CHECK_THROWS_AS(enumerate_responses(4, 7), BudgetError);
    CHECK_THROWS_AS(enumerate_responses(5, 6, {6, 6, 100}), BudgetError);
  }

  TEST_CASE("exact sequence KL worked values") {
    const auto m = TabularLM::random(3, 1, 8, 5);
    CHECK(std::abs(exact_sequence_kl(m, m, {0}, 3)) < 1e-14);
    const std::vector<std::vector<double>> p_rows{{1, 0}, {1, 0}};
    const std::vector<std::vector<double>> q_rows{{.5, .5}, {.5, .5}};
    const TabularLM p(2, 1, 4, p_rows), q(2, 1, 4, q_rows);
    CHECK(exact_sequence_kl(p, q, {0}, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-10));
  }

  TEST_CASE("token-decomposed KL equals the sequence KL") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      const auto t = TabularLM::random(4, 2, 10, 100 + s, 1.5);
      const auto q = TabularLM::random(4, 2, 10, 200 + s);
      const double exact = exact_sequence_kl(t, q, {0, 3}, 4);
      CHECK(std::abs(expected_token_kl(t, q, {0, 3}, 4) - exact) <= 1e-8);
    }
  }

  TEST_CASE("contrastive rewrite residuals") {
    const auto t = TabularLM::random(4, 1, 8, 7);
    CHECK(remark1_check({{0}, {2, 1}, {3, 1}, 1}, t, t, 0.1, 1.0) == doctest::Approx(0.0).scale(1.0));
    const auto q = TabularLM::random(4, 1, 8, 8);
    for (double lambda : {0.5, 1.0, 2.0}) {
      CHECK(remark1_check({{0}, {2, 3, 1}, {3, 1}, 1}, t, q, 0.1, lambda) <= 1e-9);
    }
    CHECK(remark1_expectation_residual(t, q, {0}, 3, 0.1) <= 1e-9);
    CHECK_THROWS_AS(remark1_check({{0}, {2, 1}, {3, 1}, 1}, t, q, 0.1, 0.0), ParameterError);
  }

  TEST_CASE("Mercator residual vanishes at p == q") {
    CHECK(mercator_residual(0.4, 0.4, 0.3) == doctest::Approx(0.0).scale(1.0));
    CHECK(mercator_log_ratio(0.4, 0.4, 0.3) == doctest::Approx(0.0).scale(1.0));
    const double lr = mercator_log_ratio(0.9, 0.5, 0.2);
    CHECK(lr == doctest::Approx(std::log(0.9 / (0.2 * 0.9 + 0.8 * 0.5))).epsilon(1e-14));
    CHECK_THROWS_AS(mercator_residual(0.0, 0.5, 0.1), ParameterError);
  }

  TEST_CASE("finite differences of a linear loss are exact to rounding") {
    Tensor w = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
    std::vector<NamedTensor> params{{"w", w}};
    const Tensor c = Tensor::from({3}, {3.0, -2.0, 0.25});
    const double err = finite_diff_gradcheck([&](Graph& g) { return g.sum(g.mul(w, c)); }, params);
    CHECK(err < 1e-9);
    GradcheckOptions off;
    off.analytic_scale = 1.01;
    CHECK(finite_diff_gradcheck([&](Graph& g) { return g.sum(g.mul(w, c)); }, params, off) > 1e-3);
  }

  TEST_CASE("a non-finite loss aborts the gradient check") {
    Tensor w = Tensor::from({1}, {0.0}, true);
    std::vector<NamedTensor> params{{"w", w}};
    CHECK_THROWS_AS(finite_diff_gradcheck([&](Graph&) { return Tensor::scalar(NAN); }, params), NumericError);
  }

  TEST_CASE("CALD passes the gradient check on the transformer fixture") {
    auto fx = make_gradcheck_fixture(3);
    auto params = fx.student->parameters();
    const double err = finite_diff_gradcheck(
        [&](Graph& g) { return cald_loss(g, fx.batch, *fx.student, *fx.teacher, 0.1); }, params);
    CHECK(err <= 1e-4);
  }

  TEST_CASE("oracle suite passes and catches an injected fault") {
    const auto ok = run_oracle_suite();
    for (const auto& c : ok) {
      INFO(c.name << " value " << c.value);
      CHECK(c.passed);
    }
    OracleSuiteOptions bad;
    bad.inject_gradient_fault = true;
    const auto faulty = run_oracle_suite(bad);
    CHECK(std::any_of(faulty.begin(), faulty.end(), [](const OracleCheck& c) { return !c.passed; }));
  }
}
