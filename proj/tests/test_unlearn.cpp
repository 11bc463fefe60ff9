#include <doctest.h>

#include <cmath>

#include "rfau/data.hpp"
#include "rfau/error.hpp"
#include "rfau/unlearn.hpp"

using namespace rfau;

namespace {

// A tape with a single instrumented layer built directly from matrices.
DecomposedTape single_layer_tape(const Matrix& pretrained, const Matrix& residual) {
  DecomposedTape t;
  t.student.input = Matrix(pretrained.rows(), 1);
  LayerDecomposition d;
  d.layer = 0;
  d.pretrained = pretrained;
  d.residual = residual;
  d.summed = pretrained;
  for (std::size_t i = 0; i < residual.size(); ++i) d.summed.values()[i] += residual.values()[i];
  d.branch = residual;
  t.layers.push_back(d);
  return t;
}

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
  return {m, split_unlearning(d.train, d.test, {SplitMode::class_wise, 0, 0, 0})};
}

double accuracy_on(const Mlp& m, const Dataset& d) {
  const Matrix logits = predict_logits(m, d.x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.size(); ++i) hits += argmax(logits.row(i)) == d.label(i);
  return static_cast<double>(hits) / static_cast<double>(d.size());
}

}  // namespace

TEST_CASE("batch_mean_features averages retained pretrained rows") {
  const DecomposedTape t = single_layer_tape(Matrix::from_rows({{1, 2}, {3, 4}, {100, 100}}), Matrix(3, 2));
  const LayerMeans m = batch_mean_features(t, 2);
  REQUIRE(m.size() == 1);
  CHECK(m[0] == Vector{2, 3});
  CHECK(batch_mean_features(t, std::vector<bool>{false, true, false})[0] == Vector{3, 4});
  CHECK_THROWS_AS(batch_mean_features(t, std::vector<bool>{true}), ShapeError);
}

TEST_CASE("average_label") {
  const Matrix labels = Matrix::from_rows({{1, 0, 0}, {1, 0, 0}, {0, 0, 1}});
  const Vector y = average_label(labels);
  CHECK(y[0] == doctest::Approx(2.0 / 3.0));
  CHECK(y[1] == 0.0);
  CHECK(y[2] == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(average_label(Matrix(0, 3)), DegenerateError);
}

TEST_CASE("loss_inter hand cases") {
  // One retained row with residual [3, 4]: alpha * ||.|| = 5.
  const DecomposedTape r = single_layer_tape(Matrix::from_rows({{0, 0}}), Matrix::from_rows({{3, 4}}));
  const LayerMeans targets{{0, 0}};
  InterLoss l = loss_inter(r, 1, targets, 1.0, 1.0);
  CHECK(l.retained == doctest::Approx(5.0));
  CHECK(l.forget == 0.0);
  CHECK(loss_inter(r, 1, targets, 2.0, 1.0).retained == doctest::Approx(10.0));

  // An unlearning row whose residual moves it exactly onto the retained mean costs nothing.
  const DecomposedTape f = single_layer_tape(Matrix::from_rows({{1, 1}}), Matrix::from_rows({{2, -1}}));
  const LayerMeans mean{{3, 0}};
  CHECK(loss_inter(f, 0, mean, 1.0, 1.0).forget == doctest::Approx(0.0));
  // A zero residual costs the distance to the mean: ||[3,0] - [1,1]|| = sqrt(5).
  const DecomposedTape f0 = single_layer_tape(Matrix::from_rows({{1, 1}}), Matrix(1, 2));
  CHECK(loss_inter(f0, 0, mean, 1.0, 1.0).forget == doctest::Approx(std::sqrt(5.0)));

  CHECK_THROWS_AS(loss_inter(r, 1, LayerMeans{}, 1.0, 1.0), ShapeError);
}

TEST_CASE("loss_inter forget term is linear in beta and averaged over |b_f|") {
  Rng rng(1);
  const Matrix pre = gaussian_fill(rng, 6, 3, 0, 1);
  const Matrix res = gaussian_fill(rng, 6, 3, 0, 1);
  const DecomposedTape t = single_layer_tape(pre, res);
  const LayerMeans targets{Vector{0.1, 0.2, 0.3}};
  double previous = -1;
  for (double beta : {0.0, 0.5, 1.0, 2.0, 4.0}) {
    const double f = loss_inter(t, 2, targets, 1.0, beta).forget;
    CHECK(f == doctest::Approx(beta * loss_inter(t, 2, targets, 1.0, 1.0).forget));
    CHECK(f >= previous);
    previous = f;
  }
  // Duplicating every row leaves the per-subset means unchanged.
  Matrix pre2(12, 3), res2(12, 3);
  const std::vector<std::size_t> order{0, 1, 0, 1, 2, 3, 4, 5, 2, 3, 4, 5};
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      pre2(i, j) = pre(order[i], j);
      res2(i, j) = res(order[i], j);
    }
  const InterLoss once = loss_inter(t, 2, targets, 1.0, 1.0);
  const InterLoss twice = loss_inter(single_layer_tape(pre2, res2), 4, targets, 1.0, 1.0);
  CHECK(twice.retained == doctest::Approx(once.retained).epsilon(1e-12));
  CHECK(twice.forget == doctest::Approx(once.forget).epsilon(1e-12));
}

TEST_CASE("loss_task") {
  const Matrix logits = Matrix::from_rows({{0, 0}, {5, 5}});
  const Matrix labels = Matrix::from_rows({{1, 0}, {0, 1}});
  const Vector soft{0.5, 0.5};
  const TaskLoss t = loss_task(logits, labels, 1, soft, 1.0, 1.0);
  CHECK(t.retained == doctest::Approx(std::log(2.0)).epsilon(1e-10));
  CHECK(t.forget == doctest::Approx(std::log(2.0)).epsilon(1e-10));
  const TaskLoss scaled = loss_task(logits, labels, 1, soft, 2.0, 0.0);
  CHECK(scaled.retained == doctest::Approx(2 * std::log(2.0)).epsilon(1e-10));
  CHECK(scaled.forget == 0.0);
  CHECK_THROWS_AS(loss_task(logits, Matrix(2, 3), 1, soft, 1, 1), ShapeError);
}

TEST_CASE("total_loss") {
  CHECK(total_loss(2.0, 1.0, 0.5, 1) == doctest::Approx(1.5));
  CHECK(total_loss(4.0, 1.0, 0.5, 2) == doctest::Approx(1.5));
  CHECK(total_loss(7.0, 3.0, 0.0, 3) == doctest::Approx(3.0));
  CHECK(total_loss(6.0, 3.0, 1.0, 3) == doctest::Approx(2.0));
  CHECK_THROWS_AS(total_loss(1.0, 1.0, 0.5, 0), ConfigError);
}

TEST_CASE("config validation collects every violation") {
  UnlearnConfig c;
  CHECK(c.violations().empty());
  c.gamma = 1.5;
  c.batch = 1;
  c.rank = 0;
  const auto v = c.violations();
  CHECK(v.size() == 3);
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_unlearn_mode("teacher") == UnlearnMode::teacher);
  CHECK(parse_target_scope("global") == TargetScope::global);
  CHECK_THROWS_AS(parse_unlearn_mode("student"), ConfigError);
}

TEST_CASE("residual and teacher objectives agree on one batch") {
  const Setup s = trained_setup(2);
  Rng rng(3);
  InstrumentedModel im = attach(s.original, default_instrumented_layers(s.original), {2, 0.01, 1.0}, rng);
  for (auto& ad : im.adapters()) ad.b = gaussian_fill(rng, ad.b.rows(), ad.b.cols(), 0, 0.1);
  const auto batches = stratified_batches(s.split.retained, s.split.forget, 32, rng);
  const BatchTargets fallback = global_targets(im, s.split.retained);
  UnlearnConfig residual, teacher;
  teacher.mode = UnlearnMode::teacher;
  for (const auto& b : batches) {
    const BatchObjective a = evaluate_objective(im, b, fallback, residual);
    const BatchObjective t = evaluate_objective(im, b, fallback, teacher);
    CHECK(std::abs(a.total - t.total) <= 1e-10);
    for (std::size_t k = 0; k < a.grads.size(); ++k) {
      for (std::size_t i = 0; i < a.grads[k].b.size(); ++i)
        CHECK(std::abs(a.grads[k].b.values()[i] - t.grads[k].b.values()[i]) <= 1e-10);
    }
  }
}

TEST_CASE("gamma endpoints select one term") {
  const Setup s = trained_setup(4);
  Rng rng(5);
  InstrumentedModel im = attach(s.original, default_instrumented_layers(s.original), {2, 0.01, 1.0}, rng);
  for (auto& ad : im.adapters()) ad.b = gaussian_fill(rng, ad.b.rows(), ad.b.cols(), 0, 0.1);
  const auto batches = stratified_batches(s.split.retained, s.split.forget, 32, rng);
  const BatchTargets fallback = global_targets(im, s.split.retained);
  UnlearnConfig c;
  c.gamma = 0.0;
  const BatchObjective task_only = evaluate_objective(im, batches[0], fallback, c);
  CHECK(task_only.total == doctest::Approx(task_only.task.total()));
  c.gamma = 1.0;
  const BatchObjective inter_only = evaluate_objective(im, batches[0], fallback, c);
  CHECK(inter_only.total == doctest::Approx(inter_only.inter.total() / 2.0));
}

TEST_CASE("running targets are a fixed point of identical updates") {
  BatchTargets init{{Vector{1, 2}}, Vector{0.5, 0.5}};
  RunningTargets r(init, 0.9);
  r.update(init);
  CHECK(r.current().features[0] == Vector{1, 2});
  BatchTargets other{{Vector{11, 2}}, Vector{1, 0}};
  r.update(other);
  CHECK(r.current().features[0][0] == doctest::Approx(2.0));
  CHECK(r.current().label[0] == doctest::Approx(0.55));
}

TEST_CASE("run_unlearning log length, determinism and effect") {
  const Setup s = trained_setup(6);
  UnlearnConfig c;
  c.seed = 11;
  const UnlearnResult one = run_unlearning(s.original, s.split.retained, s.split.forget, c);
  c.epochs = 2;
  const UnlearnResult two = run_unlearning(s.original, s.split.retained, s.split.forget, c);
  CHECK(two.log.size() == 2 * one.log.size());
  const UnlearnResult again = run_unlearning(s.original, s.split.retained, s.split.forget, c);
  CHECK(again.model == two.model);

  CHECK(accuracy_on(one.model, s.split.forget) < accuracy_on(s.original, s.split.forget));
  CHECK(accuracy_on(one.model, s.split.retained) >= 0.95);
  CHECK(batch_log_jsonl(one.log).find("\"l_inter_r\"") != std::string::npos);

  c.epochs = 0;
  CHECK(run_unlearning(s.original, s.split.retained, s.split.forget, c).model == s.original);
}

TEST_CASE("empty forget set keeps the model near the original") {
  const Setup s = trained_setup(7);
  const Dataset none = Dataset::empty_like(s.split.retained.dim(), s.split.retained.classes);
  UnlearnConfig c;
  const UnlearnResult r = run_unlearning(s.original, s.split.retained, none, c);
  for (const auto& entry : r.log) {
    CHECK(entry.l_inter_f == 0.0);
    CHECK(entry.l_task_f == 0.0);
  }
  CHECK(std::abs(accuracy_on(r.model, s.split.retained) - accuracy_on(s.original, s.split.retained)) <= 0.02);
}

TEST_CASE("effective_rank caps at the layer shape") {
  Rng rng(8);
  const std::vector<std::size_t> widths{2, 16, 16, 3};
  const Mlp m = mlp_init(widths, rng);
  CHECK(effective_rank(m, 0, 4) == 2);
  CHECK(effective_rank(m, 1, 4) == 4);
  CHECK(effective_rank(m, 1, 40) == 16);
}
