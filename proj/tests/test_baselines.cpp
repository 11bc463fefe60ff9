#include <doctest.h>

#include "rfau/baselines.hpp"
#include "rfau/error.hpp"

using namespace rfau;

namespace {

struct Setup {
  Mlp original;
  UnlearningSplit split;
};

Setup trained_setup(std::uint64_t seed) {
  Rng rng(seed);
  const TrainTest d = gen_gaussian_clusters(ClusterSpec{}, rng);
  const std::vector<std::size_t> widths{2, 16, 16, 3};
  Mlp m = mlp_init(widths, rng);
  train_supervised(m, d.train, {}, rng);
  return {m, split_unlearning(d.train, d.test, {SplitMode::class_wise, 2, 0, 0})};
}

double mean_ce(const Mlp& m, const Dataset& d) {
  const Vector w(d.size(), 1.0 / static_cast<double>(d.size()));
  Matrix unused;
  return weighted_softmax_xent(predict_logits(m, d.x), d.y, w, unused);
}

}  // namespace

TEST_CASE("baseline names parse and unknown names list the valid ones") {
  for (const auto& n : baseline_names()) CHECK(to_string(parse_baseline(n)) == n);
  CHECK(baseline_names().size() == 4);
  try {
    parse_baseline("scrub");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const auto& n : baseline_names()) CHECK(msg.find(n) != std::string::npos);
  }
}

TEST_CASE("spec validation") {
  BaselineSpec s;
  CHECK(s.violations().empty());
  s.method = BaselineMethod::badt;
  s.temperature = 0;
  s.batch = 0;
  CHECK(s.violations().size() == 2);
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("zero learning rate or zero epochs is the identity") {
  const Setup s = trained_setup(1);
  for (auto method : {BaselineMethod::finetune, BaselineMethod::neggrad, BaselineMethod::badt}) {
    BaselineSpec lr0;
    lr0.method = method;
    lr0.lr = 0.0;
    lr0.optimizer = OptimizerKind::sgd;
    CHECK(run_baseline(s.original, s.split.retained, s.split.forget, lr0).model == s.original);
    BaselineSpec e0;
    e0.method = method;
    e0.epochs = 0;
    const BaselineResult r = run_baseline(s.original, s.split.retained, s.split.forget, e0);
    CHECK(r.model == s.original);
    CHECK(r.log.empty());
  }
}

TEST_CASE("neggrad raises the forget cross-entropy") {
  const Setup s = trained_setup(2);
  BaselineSpec spec;
  spec.method = BaselineMethod::neggrad;
  spec.seed = 3;
  const BaselineResult r = neggrad(s.original, s.split.forget, spec);
  CHECK(mean_ce(r.model, s.split.forget) > mean_ce(s.original, s.split.forget));
  REQUIRE(r.log.size() == 1);
}

TEST_CASE("bad teacher pulls forget outputs toward the incompetent teacher") {
  const Setup s = trained_setup(4);
  BaselineSpec spec;
  spec.method = BaselineMethod::badt;
  spec.seed = 5;
  const Mlp teacher = incompetent_teacher(s.original, spec);
  CHECK(teacher.widths() == s.original.widths());
  CHECK(incompetent_teacher(s.original, spec) == teacher);
  const double before = mean_kl(predict_logits(teacher, s.split.forget.x), predict_logits(s.original, s.split.forget.x));
  const BaselineResult r = bad_teacher(s.original, s.split.retained, s.split.forget, spec);
  const double after = mean_kl(predict_logits(teacher, s.split.forget.x), predict_logits(r.model, s.split.forget.x));
  CHECK(after < before);
}

TEST_CASE("mean_kl") {
  const Matrix p = Matrix::from_rows({{1, 2, 3}, {0, 0, 0}});
  CHECK(mean_kl(p, p) == doctest::Approx(0.0));
  const Matrix q = Matrix::from_rows({{3, 2, 1}, {0, 1, 0}});
  CHECK(mean_kl(p, q) > 0.0);
  CHECK_THROWS_AS(mean_kl(p, Matrix(2, 2)), ShapeError);
}

TEST_CASE("baselines are deterministic in their seed") {
  const Setup s = trained_setup(6);
  for (const auto& name : baseline_names()) {
    BaselineSpec spec;
    spec.method = parse_baseline(name);
    spec.seed = 9;
    const BaselineResult a = run_baseline(s.original, s.split.retained, s.split.forget, spec);
    const BaselineResult b = run_baseline(s.original, s.split.retained, s.split.forget, spec);
    CHECK(a.model == b.model);
    CHECK(baseline_log_jsonl(a.log) == baseline_log_jsonl(b.log));
  }
}

TEST_CASE("retrain ignores the original and learns the retained classes") {
  const Setup s = trained_setup(7);
  BaselineSpec spec;
  spec.method = BaselineMethod::retrain;
  spec.epochs = 20;
  spec.seed = 8;
  const std::vector<std::size_t> widths = s.original.widths();
  const BaselineResult r = retrain(s.split.retained, widths, spec);
  CHECK(r.log.size() == 20);
  const Matrix logits = predict_logits(r.model, s.split.retained.x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < s.split.retained.size(); ++i) hits += argmax(logits.row(i)) == s.split.retained.label(i);
  CHECK(static_cast<double>(hits) / static_cast<double>(s.split.retained.size()) >= 0.95);
}
