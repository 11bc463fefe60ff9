#include <doctest.h>

#include <cmath>

#include "rfau/error.hpp"
#include "rfau/lora.hpp"

using namespace rfau;

namespace {

Mlp identity_net() {
  LinearLayer l0{Matrix::identity(2), {0, 0}};
  LinearLayer l1{Matrix::from_rows({{1, 0}, {0, 1}, {1, 1}}), {0, 0, 0}};
  return Mlp({l0, l1});
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

InstrumentedModel random_adapted(Rng& rng, std::size_t rank) {
  const std::vector<std::size_t> widths{3, 6, 5, 4};
  const Mlp base = mlp_init(widths, rng);
  const std::vector<std::size_t> ids{0, 1};
  InstrumentedModel im = attach(base, ids, {rank, 0.01, 1.0}, rng);
  for (auto& ad : im.adapters()) {
    ad.a = gaussian_fill(rng, ad.a.rows(), ad.a.cols(), 0, 0.5);
    ad.b = gaussian_fill(rng, ad.b.rows(), ad.b.cols(), 0, 0.5);
  }
  return im;
}

}  // namespace

TEST_CASE("hand case: W = I, B = [[1],[0]], A = [[0,1]], x = [1,2]") {
  InstrumentedModel im(identity_net(), {LoraAdapter{0, Matrix::from_rows({{0, 1}}), Matrix::from_rows({{1}, {0}})}});
  const DecomposedForward f = forward_decomposed(im, Matrix::from_rows({{1, 2}}));
  REQUIRE(f.tape.layers.size() == 1);
  const auto& d = f.tape.layers[0];
  CHECK(d.pretrained == Matrix::from_rows({{1, 2}}));
  CHECK(d.branch == Matrix::from_rows({{2, 0}}));
  CHECK(d.residual == Matrix::from_rows({{2, 0}}));
  CHECK(d.summed == Matrix::from_rows({{3, 2}}));
  CHECK(f.logits == Matrix::from_rows({{3, 2, 5}}));
  CHECK(merge(im).layer(0).weight == Matrix::from_rows({{1, 1}, {0, 1}}));
}

TEST_CASE("attach initializes B to zero and keeps the base frozen") {
  Rng rng(1);
  const std::vector<std::size_t> widths{2, 8, 8, 3};
  const Mlp base = mlp_init(widths, rng);
  const InstrumentedModel im = attach(base, default_instrumented_layers(base), {2, 0.01, 1.0}, rng);
  CHECK(im.instrumented_layers() == std::vector<std::size_t>{0, 1});
  for (const auto& ad : im.adapters()) {
    CHECK(ad.b == Matrix(ad.b.rows(), ad.b.cols()));
    CHECK(ad.rank() == 2);
  }
  CHECK(im.base() == base);
  const Matrix x = gaussian_fill(rng, 20, 2, 0, 1);
  const DecomposedForward f = forward_decomposed(im, x);
  CHECK(f.logits == predict_logits(base, x));
  for (const auto& d : f.tape.layers) CHECK(d.residual == Matrix(d.residual.rows(), d.residual.cols()));
  CHECK(merge(im) == base);
}

TEST_CASE("rank bounds") {
  Rng rng(2);
  const std::vector<std::size_t> widths{2, 4, 3};
  const Mlp base = mlp_init(widths, rng);
  const std::vector<std::size_t> first{0};
  CHECK(attach(base, first, {2, 0.01, 1.0}, rng).adapters()[0].rank() == 2);
  CHECK_THROWS_AS(attach(base, first, {3, 0.01, 1.0}, rng), ConfigError);
  CHECK_THROWS_AS(attach(base, first, {0, 0.01, 1.0}, rng), ConfigError);
  const std::vector<std::size_t> missing{5};
  CHECK_THROWS_AS(attach(base, missing, {1, 0.01, 1.0}, rng), ConfigError);
  const std::vector<std::size_t> twice{0, 0};
  CHECK_THROWS_AS(attach(base, twice, {1, 0.01, 1.0}, rng), ConfigError);
}

TEST_CASE("merged network reproduces the adapted forward pass") {
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    const InstrumentedModel im = random_adapted(rng, 2);
    const Matrix x = gaussian_fill(rng, 16, 3, 0, 1);
    const Mlp merged = merge(im);
    CHECK(max_abs_diff(predict_logits(merged, x), forward_decomposed(im, x).logits) <= 1e-12);
    CHECK(max_abs_diff(predict_logits(merged, x), forward_adapted(im, x).logits) <= 1e-12);
    // Merging does not touch the adapted model.
    CHECK(merge(im) == merged);
  }
}

TEST_CASE("decomposition invariants") {
  Rng rng(4);
  const InstrumentedModel im = random_adapted(rng, 3);
  const Matrix x = gaussian_fill(rng, 8, 3, 0, 1);
  const DecomposedForward f = forward_decomposed(im, x);
  const ForwardResult frozen = forward(im.base(), x);
  for (const auto& d : f.tape.layers) {
    CHECK(d.pretrained == frozen.tape.pre[d.layer]);
    Matrix sum = d.pretrained;
    for (std::size_t i = 0; i < sum.size(); ++i) sum.values()[i] += d.residual.values()[i];
    CHECK(max_abs_diff(sum, d.summed) <= 1e-12);
  }
  // The first instrumented layer has nothing active upstream.
  CHECK(max_abs_diff(f.tape.layers[0].residual, f.tape.layers[0].branch) <= 1e-15);
}

TEST_CASE("adapter gradients match central differences") {
  Rng rng(5);
  InstrumentedModel im = random_adapted(rng, 2);
  const Matrix x = gaussian_fill(rng, 6, 3, 0, 1);
  const std::vector<std::size_t> labels{0, 1, 2, 3, 0, 1};
  const Matrix y = [&] {
    Matrix m(6, 4);
    for (std::size_t i = 0; i < 6; ++i) m(i, labels[i]) = 1;
    return m;
  }();
  const Vector w(6, 1.0 / 6.0);
  auto loss = [&](const InstrumentedModel& model, Matrix* d) {
    Matrix tmp;
    const double l = weighted_softmax_xent(forward_adapted(model, x).logits, y, w, tmp);
    if (d) *d = tmp;
    return l;
  };
  Matrix dlogits;
  loss(im, &dlogits);
  const DecomposedForward f = forward_decomposed(im, x);
  const AdapterGrads g = backward_adapters(im, f.tape, dlogits);
  REQUIRE(g.size() == im.adapters().size());

  for (std::size_t a = 0; a < g.size(); ++a) {
    for (Matrix LoraAdapter::*field : {&LoraAdapter::a, &LoraAdapter::b}) {
      const Matrix& analytic = field == &LoraAdapter::a ? g[a].a : g[a].b;
      const Vector start((im.adapters()[a].*field).values().begin(), (im.adapters()[a].*field).values().end());
      const Vector numeric = finite_diff_grad(
          [&](std::span<const double> t) {
            InstrumentedModel probe = im;
            const auto target = (probe.adapters()[a].*field).values();
            std::copy(t.begin(), t.end(), target.begin());
            return loss(probe, nullptr);
          },
          start, 1e-6);
      for (std::size_t i = 0; i < numeric.size(); ++i) {
        const double scale = std::max({std::abs(numeric[i]), std::abs(analytic.values()[i]), 1e-6});
        CHECK(std::abs(numeric[i] - analytic.values()[i]) / scale <= 1e-5);
      }
    }
  }
}

TEST_CASE("adapter slots update adapters only") {
  Rng rng(6);
  InstrumentedModel im = random_adapted(rng, 1);
  const Mlp base = im.base();
  AdapterGrads g;
  for (const auto& ad : im.adapters()) g.push_back({Matrix(ad.a.rows(), ad.a.cols(), 1.0), Matrix(ad.b.rows(), ad.b.cols(), 1.0)});
  const auto before = im.adapters();
  sgd_update(adapter_slots(im, g), 0.5);
  CHECK(im.base() == base);
  for (std::size_t k = 0; k < before.size(); ++k) {
    CHECK(im.adapters()[k].a(0, 0) == doctest::Approx(before[k].a(0, 0) - 0.5));
    CHECK(im.adapters()[k].b(0, 0) == doctest::Approx(before[k].b(0, 0) - 0.5));
  }
}
