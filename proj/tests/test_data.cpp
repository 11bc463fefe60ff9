#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "rfau/data.hpp"
#include "rfau/error.hpp"
#include "rfau/model.hpp"

using namespace rfau;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "rfau_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>((v >> s) & 0xff));
}

// Rows as (features..., label) tuples, for multiset comparisons.
std::vector<std::vector<double>> row_multiset(const Dataset& d) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::vector<double> r(d.x.row(i).begin(), d.x.row(i).end());
    r.push_back(static_cast<double>(d.label(i)));
    out.push_back(r);
  }
  std::sort(out.begin(), out.end());
  return out;
}

Dataset toy(std::size_t classes, std::size_t per_class, std::size_t total_classes = 0) {
  if (total_classes == 0) total_classes = classes;
  std::vector<std::size_t> labels;
  Matrix x(classes * per_class, 2);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = c * per_class + i;
      x(r, 0) = static_cast<double>(r);
      x(r, 1) = static_cast<double>(c);
      labels.push_back(c);
    }
  }
  return Dataset::from_labels(x, labels, total_classes);
}

}  // namespace

TEST_CASE("simplex means are pairwise separated by the requested distance") {
  for (std::size_t k : {2u, 3u, 5u}) {
    const Matrix m = simplex_means(k, k, 6.0);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) {
        double d = 0;
        for (std::size_t c = 0; c < m.cols(); ++c) d += (m(i, c) - m(j, c)) * (m(i, c) - m(j, c));
        CHECK(std::sqrt(d) == doctest::Approx(6.0).epsilon(1e-9));
      }
    }
  }
  CHECK_THROWS_AS(simplex_means(4, 2, 1.0), ConfigError);
}

TEST_CASE("gen_gaussian_clusters sizes, stratification and determinism") {
  ClusterSpec spec;
  Rng a(1), b(1);
  const TrainTest d = gen_gaussian_clusters(spec, a);
  CHECK(d.train.size() == 1200);
  CHECK(d.test.size() == 300);
  std::map<std::size_t, std::size_t> train_counts, test_counts;
  for (auto l : d.train.labels()) ++train_counts[l];
  for (auto l : d.test.labels()) ++test_counts[l];
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(train_counts[c] == 400);
    CHECK(test_counts[c] == 100);
  }
  const TrainTest e = gen_gaussian_clusters(spec, b);
  CHECK(d.train.x == e.train.x);
  CHECK(d.test.y == e.test.y);
}

TEST_CASE("gen_gaussian_clusters rejects invalid parameters") {
  Rng rng(2);
  ClusterSpec s;
  s.separation = 0;
  CHECK_THROWS_AS(gen_gaussian_clusters(s, rng), ConfigError);
  s = ClusterSpec{};
  s.classes = 1;
  CHECK_THROWS_AS(gen_gaussian_clusters(s, rng), ConfigError);
  s = ClusterSpec{};
  s.per_class = 1;
  CHECK_THROWS_AS(gen_gaussian_clusters(s, rng), ConfigError);
}

TEST_CASE("well separated clusters are learnable to 99% test accuracy") {
  ClusterSpec s;
  s.separation = 10;
  s.std = 1;
  Rng rng(3);
  const TrainTest d = gen_gaussian_clusters(s, rng);
  const std::vector<std::size_t> widths{2, 16, 3};
  Mlp m = mlp_init(widths, rng);
  train_supervised(m, d.train, {20, 32, 1e-2, OptimizerKind::adamw, 0.0}, rng);
  const Matrix logits = predict_logits(m, d.test.x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.test.size(); ++i) hits += argmax(logits.row(i)) == d.test.label(i);
  CHECK(static_cast<double>(hits) / static_cast<double>(d.test.size()) >= 0.99);
}

TEST_CASE("load_csv parses the documented layout") {
  const fs::path p = temp_file("two.csv");
  std::ofstream(p) << "0,1,0\n1,0,1";
  const Dataset d = load_csv(p);
  CHECK(d.x == Matrix::from_rows({{0, 1}, {1, 0}}));
  CHECK(d.labels() == std::vector<std::size_t>{0, 1});
  CHECK(d.classes == 2);
}

TEST_CASE("load_csv reports malformed rows with their location") {
  const fs::path p = temp_file("bad.csv");
  std::ofstream(p) << "0,1,0\n1,0\n";
  try {
    load_csv(p);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("byte offset 6") != std::string::npos);
  }
  std::ofstream(p) << "0,1,x\n";
  CHECK_THROWS_AS(load_csv(p), FormatError);
  std::ofstream(p) << "0,1,5\n";
  CHECK_THROWS_AS(load_csv(p, 3), FormatError);
  CHECK_THROWS_AS(load_csv(temp_file("missing.csv")), IoError);
}

TEST_CASE("write_csv then load_csv is exact") {
  Rng rng(4);
  const TrainTest d = gen_gaussian_clusters(ClusterSpec{}, rng);
  const fs::path p = temp_file("round.csv");
  write_csv(d.train, p);
  const Dataset back = load_csv(p, 3);
  CHECK(back.x == d.train.x);
  CHECK(back.y == d.train.y);
}

TEST_CASE("load_idx") {
  std::vector<unsigned char> img, lab;
  put_u32(img, 0x00000803);
  put_u32(img, 3);
  put_u32(img, 2);
  put_u32(img, 2);
  for (unsigned char v : {0, 255, 51, 102, 1, 2, 3, 4, 5, 6, 7, 8}) img.push_back(v);
  put_u32(lab, 0x00000801);
  put_u32(lab, 3);
  for (unsigned char v : {7, 1, 9}) lab.push_back(v);
  const fs::path ip = temp_file("img.idx"), lp = temp_file("lab.idx");
  write_bytes(ip, img);
  write_bytes(lp, lab);

  Rng rng(5);
  const Dataset d = load_idx(ip, lp, 0, rng);
  CHECK(d.size() == 3);
  CHECK(d.dim() == 4);
  CHECK(d.x(0, 1) == 1.0);
  CHECK(d.x(0, 2) == doctest::Approx(0.2));
  CHECK(d.labels() == std::vector<std::size_t>{7, 1, 9});

  Rng r1(6), r2(6);
  const Dataset s1 = load_idx(ip, lp, 3, r1);
  const Dataset s2 = load_idx(ip, lp, 3, r2);
  CHECK(s1.x == s2.x);
  CHECK(row_multiset(s1) == row_multiset(d));

  std::vector<unsigned char> wrong = img;
  wrong[3] = 0x01;
  write_bytes(ip, wrong);
  try {
    load_idx(ip, lp, 0, rng);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("0x00000803") != std::string::npos);
  }

  write_bytes(ip, img);
  lab.back() = 12;
  write_bytes(lp, lab);
  CHECK_THROWS_AS(load_idx(ip, lp, 0, rng), FormatError);
}

TEST_CASE("class split counts and partition") {
  const Dataset train = toy(3, 100);
  const Dataset test = toy(3, 10);
  const UnlearningSplit s = split_unlearning(train, test, {SplitMode::class_wise, 1, 0, 0});
  CHECK(s.forget.size() == 100);
  CHECK(s.retained.size() == 200);
  for (auto l : s.forget.labels()) CHECK(l == 1);
  for (auto l : s.retained.labels()) CHECK(l != 1);
  REQUIRE(s.forget_test);
  REQUIRE(s.retained_test);
  CHECK(s.forget_test->size() == 10);
  CHECK(s.retained_test->size() == 20);
  CHECK(row_multiset(concat(s.retained, s.forget)) == row_multiset(train));
  CHECK_THROWS_AS(split_unlearning(train, test, {SplitMode::class_wise, 3, 0, 0}), ConfigError);
}

TEST_CASE("sample split counts, partition and determinism") {
  const Dataset train = toy(4, 100);
  const Dataset test = toy(4, 5);
  const SplitSpec spec{SplitMode::sample_wise, 0, 128, 9};
  const UnlearningSplit s = split_unlearning(train, test, spec);
  CHECK(s.forget.size() == 128);
  CHECK(s.retained.size() == 272);
  CHECK_FALSE(s.forget_test.has_value());
  CHECK(row_multiset(concat(s.retained, s.forget)) == row_multiset(train));
  CHECK(split_unlearning(train, test, spec).forget.x == s.forget.x);
  std::map<std::size_t, int> seen;
  for (auto l : s.forget.labels()) ++seen[l];
  CHECK(seen.size() > 1);
  CHECK_THROWS_AS(split_unlearning(train, test, {SplitMode::sample_wise, 0, 400, 0}), ConfigError);
  CHECK_THROWS_AS(split_unlearning(train, test, {SplitMode::sample_wise, 0, 0, 0}), ConfigError);
}

TEST_CASE("stratified batches: 90 retained, 10 forget, batch 10") {
  const Dataset all = toy(2, 50);
  std::vector<std::size_t> r(90), f(10);
  for (std::size_t i = 0; i < 90; ++i) r[i] = i;
  for (std::size_t i = 0; i < 10; ++i) f[i] = 90 + i;
  const Dataset dr = all.subset(r), df = all.subset(f);
  Rng rng(7);
  const auto batches = stratified_batches(dr, df, 10, rng);
  CHECK(batches.size() == 10);
  Dataset joined = Dataset::empty_like(2, 2);
  for (const auto& b : batches) {
    CHECK(b.retained == 9);
    CHECK(b.forget() == 1);
    // Retained rows come first.
    for (std::size_t i = 0; i < b.size(); ++i) CHECK((b.x(i, 0) < 90) == (i < b.retained));
    joined = concat(joined, Dataset{b.x, b.y, 2});
  }
  CHECK(row_multiset(joined) == row_multiset(all));
}

TEST_CASE("stratified batches without forget rows and uneven sizes") {
  const Dataset dr = toy(3, 17);
  const Dataset none = Dataset::empty_like(2, 3);
  Rng rng(8);
  const auto plain = stratified_batches(dr, none, 8, rng);
  CHECK(plain.size() == 7);
  std::size_t total = 0;
  for (const auto& b : plain) {
    CHECK(b.forget() == 0);
    total += b.size();
  }
  CHECK(total == 51);

  const Dataset df = toy(1, 5, 3);
  const auto mixed = stratified_batches(dr, df, 6, rng);
  Dataset joined = Dataset::empty_like(2, 3);
  for (const auto& b : mixed) {
    CHECK(b.retained >= 1);
    joined = concat(joined, Dataset{b.x, b.y, 3});
  }
  CHECK(row_multiset(joined) == row_multiset(concat(dr, df)));
  CHECK_THROWS_AS(stratified_batches(dr, none, 1, rng), ConfigError);
  CHECK_THROWS_AS(stratified_batches(dr, none, 52, rng), ConfigError);
}

TEST_CASE("stratified batches are seed deterministic") {
  const Dataset dr = toy(3, 20), df = toy(1, 6, 3);
  Rng a(9), b(9);
  const auto x = stratified_batches(dr, df, 8, a);
  const auto y = stratified_batches(dr, df, 8, b);
  REQUIRE(x.size() == y.size());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i].x == y[i].x);
}
