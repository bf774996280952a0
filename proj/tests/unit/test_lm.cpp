#include <doctest.h>

#include <cmath>

#include "dlm2/error.hpp"
#include "dlm2/lm.hpp"
#include "helpers.hpp"

using namespace dlm2;

TEST_SUITE("lm") {
  TEST_CASE("uniform table gives -ln V everywhere") {
    const auto m = TabularLM::uniform(5, 2, 8);
    for (const TokenSeq& prefix : {TokenSeq{0}, TokenSeq{0, 3}, TokenSeq{0, 4, 2, 2}}) {
      for (double x : m.next_logprobs(prefix)) CHECK(x == doctest::Approx(-std::log(5.0)).epsilon(1e-14));
    }
  }

  TEST_CASE("one-hot table puts log 1 on the forced token") {
    const auto m = TabularLM::deterministic(4, 1, 8, 3);
    const TokenSeq prefix{0, 2};
    const auto row = m.next_logprobs(prefix);
    const auto forced = std::max_element(row.begin(), row.end()) - row.begin();
    CHECK(std::abs(row[static_cast<std::size_t>(forced)]) < 1e-10);
  }

  TEST_CASE("contexts longer than the model raise a length error") {
    const auto m = TabularLM::uniform(4, 1, 3);
    CHECK_THROWS_AS(m.next_logprobs(TokenSeq{0, 2, 2, 2}), LengthError);
    CHECK_THROWS_AS(m.next_logprobs(TokenSeq{0, 7}), IndexError);
  }

  TEST_CASE("sequence log-probability") {
    const auto det = TabularLM::deterministic(4, 1, 10, 9);
    const TokenSeq prompt{0};
    const TokenSeq forced = greedy(det, prompt, 5);
    CHECK(std::abs(sequence_logprob(det, prompt, forced)) < 1e-10);

    const auto uni = TabularLM::uniform(4, 1, 10);
    CHECK(sequence_logprob(uni, prompt, {2, 3, 1}) == doctest::Approx(-3.0 * std::log(4.0)).epsilon(1e-14));
    CHECK_THROWS_AS(sequence_logprob(uni, prompt, {}), ContractError);

    const auto rnd = TabularLM::random(5, 2, 10, 4);
    const TokenSeq p2{0, 3};
    const TokenSeq resp{2, 4, 4, 1};
    double product = 1.0;
    TokenSeq ctx = p2;
    for (TokenId t : resp) {
      product *= rnd.prob(ctx, t);
      ctx.push_back(t);
    }
    CHECK(std::abs(sequence_logprob(rnd, p2, resp) - std::log(product)) <= 1e-12);
  }

  TEST_CASE("sampling a deterministic model ignores the seed") {
    const auto det = TabularLM::deterministic(5, 1, 12, 2);
    const TokenSeq prompt{0, 3};
    const TokenSeq a = sample(det, prompt, {1.0, 8, 1});
    CHECK(a == sample(det, prompt, {1.0, 8, 999}));
    CHECK(a == greedy(det, prompt, 8));
  }

  TEST_CASE("sampling is reproducible from the seed") {
    const auto rnd = TabularLM::random(6, 2, 20, 5);
    const TokenSeq prompt{0};
    CHECK(sample(rnd, prompt, {1.0, 12, 77}) == sample(rnd, prompt, {1.0, 12, 77}));
    const TokenSeq s = sample(rnd, prompt, {0.7, 12, 3});
    CHECK(s.size() <= 12);
    CHECK((s.size() == 12 || s.back() == kEos));
  }

  TEST_CASE("transformer rows are normalized and causal") {
    TinyTransformerLM m({7, 8, 2, 2, 16, 10}, 3);
    const std::vector<TokenSeq> ctx{{0, 3, 4, 5}, {0, 2}};
    Graph g(false);
    const Tensor rows = m.forward(g, ctx);
    REQUIRE(rows.rows() == 6);
    for (std::size_t r = 0; r < 6; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) s += std::exp(rows.at(r, c));
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    // Changing the last token leaves earlier rows alone; stacking matches
    // separate forwards.
    const std::vector<TokenSeq> changed{{0, 3, 4, 6}};
    Graph g2(false);
    const Tensor alt = m.forward(g2, changed);
    for (std::size_t c = 0; c < 7 * 3; ++c) CHECK(alt.values()[c] == doctest::Approx(rows.values()[c]).epsilon(1e-14));
    const std::vector<TokenSeq> second{{0, 2}};
    Graph g3(false);
    const Tensor solo = m.forward(g3, second);
    for (std::size_t c = 0; c < 14; ++c) {
      CHECK(solo.values()[c] == doctest::Approx(rows.values()[4 * 7 + c]).epsilon(1e-12));
    }
  }

  TEST_CASE("transformer gradient matches central differences") {
    TinyTransformerLM m({5, 4, 2, 2, 8, 8}, 11);
    TeacherForcedBatch b;
    b.add({0, 2}, {3, 4, 1});
    b.add({0}, {2, 1});
    auto params = m.parameters();
    std::vector<Tensor> ts;
    for (auto& p : params) ts.push_back(p.tensor);
    const double err = testing::grad_error(
        [&](Graph& g) { return g.neg(g.sum(g.gather(response_rows(g, m, b), b.targets()))); }, ts);
    CHECK(err <= 1e-4);
  }

  TEST_CASE("teacher-forced layout") {
    TeacherForcedBatch b;
    b.add({0, 5}, {2, 3, 1});
    b.add({0}, {4});
    CHECK(b.size() == 2);
    CHECK(b.total_tokens() == 4);
    CHECK(b.contexts()[0] == TokenSeq{0, 5, 2, 3});
    CHECK(b.contexts()[1] == TokenSeq{0});
    CHECK(std::vector<std::size_t>(b.row_indices().begin(), b.row_indices().end()) ==
          std::vector<std::size_t>{1, 2, 3, 4});
    CHECK(std::vector<std::size_t>(b.targets().begin(), b.targets().end()) == std::vector<std::size_t>{2, 3, 1, 4});
  }

  TEST_CASE("SFT with zero learning rate leaves parameters unchanged") {
    TinyTransformerLM m({6, 4, 1, 2, 8, 10}, 2);
    const auto before = m.state();
    const std::vector<CorpusRecord> corpus{{{0, 2}, {3, 1}}, {{0, 4}, {5, 1}}};
    train_sft(m, corpus, {1, 0.0, 2, 1, 0});
    const auto after = m.state();
    for (std::size_t i = 0; i < before.size(); ++i) {
      CHECK(std::equal(before[i].tensor.values().begin(), before[i].tensor.values().end(),
                       after[i].tensor.values().begin()));
    }
    CHECK_THROWS_AS(train_sft(m, std::span<const CorpusRecord>{}, {}), DataError);
  }

  TEST_CASE("SFT overfits a single repeated sequence") {
    TinyTransformerLM m({6, 8, 1, 2, 16, 10}, 4);
    const std::vector<CorpusRecord> corpus{{{0, 2}, {3, 4, 5, 1}}};
    const auto curve = train_sft(m, corpus, {300, 0.3, 4, 7, 0});
    CHECK(curve.front() > 1.0);
    CHECK(curve.back() < 0.05);
  }

  TEST_CASE("clones are independent") {
    TinyTransformerLM m({6, 4, 1, 2, 8, 10}, 5);
    auto c = m.clone();
    m.parameters()[0].tensor.mutable_values()[0] += 1.0;
    CHECK(c->parameters()[0].tensor.at(0) != m.parameters()[0].tensor.at(0));
  }

  TEST_CASE("transformer rebuilds from its own tensors") {
    TinyTransformerLM m({6, 8, 2, 2, 16, 12}, 6);
    const auto rebuilt = TinyTransformerLM::from_tensors(m.state());
    CHECK(rebuilt.config().layers == 2);
    CHECK(rebuilt.config().d_model == 8);
    CHECK(rebuilt.next_logprobs({0, 3, 2}) == m.next_logprobs({0, 3, 2}));
  }
}
