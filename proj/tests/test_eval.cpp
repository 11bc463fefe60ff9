#include <doctest.h>

#include <cmath>

#include "rfau/error.hpp"
#include "rfau/eval.hpp"

using namespace rfau;

namespace {

// 2-2-2 net whose head ignores its input and emits `head_bias`.
Mlp constant_head(Vector head_bias) {
  LinearLayer l0{Matrix::identity(2), {0, 0}};
  LinearLayer l1{Matrix(2, 2), std::move(head_bias)};
  return Mlp({l0, l1});
}

Dataset labelled(const Matrix& x, std::vector<std::size_t> labels, std::size_t classes) {
  return Dataset::from_labels(x, labels, classes);
}

MetricsReport sample_report() {
  MetricsReport r;
  r.method = "unlearned";
  r.seed = 3;
  r.config_hash = "abc";
  for (const char* n : {"D_r", "D_f", "D_t", "D_rt", "D_ft"}) {
    SubsetMetrics s;
    s.name = n;
    s.accuracy = 0.1 + 0.2 * static_cast<double>(r.subsets.size());
    s.activation_distance = 0.25;
    s.feature_distance_def1 = 1.0 / 3.0;
    s.feature_distance_def2 = 2.0 / 3.0;
    r.subsets.push_back(s);
  }
  r.subsets[1].activation_distance.reset();
  r.mia_success = 0.125;
  r.wall_time_seconds = 1.5;
  return r;
}

}  // namespace

TEST_CASE("accuracy hand cases") {
  const Mlp m = constant_head({1, 0});
  const Matrix x(4, 2);
  CHECK(accuracy(m, labelled(x, {0, 0, 0, 0}, 2)) == 1.0);
  CHECK(accuracy(m, labelled(x, {1, 1, 1, 1}, 2)) == 0.0);
  CHECK(accuracy(m, labelled(x, {0, 1, 0, 1}, 2)) == 0.5);
  // Ties go to class 0.
  CHECK(accuracy(constant_head({0, 0}), labelled(x, {0, 0, 0, 1}, 2)) == 0.75);
}

TEST_CASE("activation distance between opposite confident models is sqrt(2)") {
  const Matrix x(3, 2);
  CHECK(activation_distance(constant_head({100, -100}), constant_head({-100, 100}), x) ==
        doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(activation_distance(constant_head({1, 2}), constant_head({1, 2}), x) == 0.0);
}

TEST_CASE("feature distance") {
  Rng rng(1);
  const std::vector<std::size_t> widths{2, 5, 3};
  const Mlp a = mlp_init(widths, rng);
  Mlp b = a;
  for (auto& v : b.layer(0).bias) v += 1.0;
  const Matrix x = gaussian_fill(rng, 10, 2, 0, 1);
  CHECK(feature_distance(a, b, x) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(feature_distance(a, a, x) == 0.0);

  const std::vector<std::size_t> deep{2, 6, 6, 3};
  const Mlp c = mlp_init(deep, rng), d = mlp_init(deep, rng);
  CHECK(feature_distance(c, d, x) == doctest::Approx(feature_distance(d, c, x)).epsilon(1e-14));
  const std::vector<std::size_t> first{0}, second{1};
  CHECK(feature_distance(c, d, x) ==
        doctest::Approx(feature_distance(c, d, x, first) + feature_distance(c, d, x, second)).epsilon(1e-12));
  CHECK(feature_distance(c, d, x, {}, true) >= 0.0);
  const std::vector<std::size_t> beyond{3};
  CHECK_THROWS_AS(feature_distance(c, d, x, beyond), ShapeError);
}

TEST_CASE("attack on separable and identical features") {
  Vector members, non_members;
  for (int i = 0; i < 50; ++i) {
    members.push_back(0.01 * i / 50.0);
    non_members.push_back(1.0 + 0.01 * i / 50.0);
  }
  const AttackModel sep = fit_attack(members, non_members);
  CHECK(attack_accuracy(sep, members, non_members) >= 0.99);

  Rng rng(2);
  Vector same;
  for (int i = 0; i < 200; ++i) same.push_back(rng.uniform());
  const AttackModel blind = fit_attack(same, same);
  CHECK(attack_accuracy(blind, same, same) == doctest::Approx(0.5).epsilon(0.02));

  const Vector flat(10, 0.3);
  CHECK_THROWS_AS(fit_attack(flat, flat), DegenerateError);

  const AttackModel zero{0.0, 0.0, 0.0, 1.0};
  CHECK(zero.member_probability(123.0) == 0.5);
  CHECK(zero.is_member(-4.0));
}

TEST_CASE("attack features are prediction entropies") {
  const Vector h = attack_features(constant_head({0, 0}), Matrix(2, 2));
  CHECK(h[0] == doctest::Approx(std::log(2.0)).epsilon(1e-10));
  CHECK(attack_features(constant_head({100, -100}), Matrix(1, 2))[0] <= 1e-10);
}

TEST_CASE("report JSON round trip is byte identical") {
  const MetricsReport r = sample_report();
  const std::string text = report_json_text(r);
  const MetricsReport back = report_from_json(nlohmann::json::parse(text));
  CHECK(report_json_text(back) == text);
  CHECK(!back.subset("D_f").activation_distance.has_value());

  const auto doc = nlohmann::json::parse(text);
  CHECK(doc["content_hash"] == sha256_hex(report_content(r).dump()));
  // Wall time lives outside the hashed content.
  MetricsReport slower = r;
  slower.wall_time_seconds = 99;
  CHECK(nlohmann::json::parse(report_json_text(slower))["content_hash"] == doc["content_hash"]);
}

TEST_CASE("sha256 known answers") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("csv columns") {
  const auto cols = csv_columns();
  REQUIRE(cols.size() == 3 + 5 * 4 + 3);
  CHECK(cols[0] == "method");
  CHECK(cols[1] == "seed");
  CHECK(cols[2] == "config_hash");
  CHECK(cols[3] == "acc_D_r");
  CHECK(cols.back() == "wall_time_seconds");
  const std::string row = csv_row(sample_report());
  CHECK(std::count(row.begin(), row.end(), ',') == static_cast<long>(cols.size() - 1));
  CHECK(row.rfind("unlearned,3,abc,", 0) == 0);
}

TEST_CASE("evaluate on a trained model") {
  Rng rng(3);
  const TrainTest d = gen_gaussian_clusters(ClusterSpec{}, rng);
  const std::vector<std::size_t> widths{2, 16, 16, 3};
  Mlp m = mlp_init(widths, rng);
  train_supervised(m, d.train, {}, rng);
  const UnlearningSplit split = split_unlearning(d.train, d.test, {SplitMode::class_wise, 1, 0, 0});
  const MetricsReport r = evaluate(m, m, &m, split);
  CHECK(r.subsets.size() == 5);
  for (const auto& s : r.subsets) {
    CHECK(s.feature_distance_def1 == 0.0);
    CHECK(*s.feature_distance_def2 == 0.0);
    CHECK(*s.activation_distance == 0.0);
    CHECK(s.accuracy >= 0.0);
    CHECK(s.accuracy <= 1.0);
  }
  CHECK(r.subset("D_f").accuracy >= 0.95);
  CHECK(r.mia_success >= 0.0);
  CHECK(r.mia_success <= 1.0);
  const MetricsReport no_retrain = evaluate(m, m, nullptr, split);
  CHECK(!no_retrain.subset("D_r").feature_distance_def2.has_value());
  CHECK_THROWS(r.subset("D_x"));
}
