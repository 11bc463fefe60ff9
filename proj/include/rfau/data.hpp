#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <vector>

#include "rfau/numerics.hpp"

namespace rfau {

// Features plus one-hot labels. Every label row has exactly one 1.
struct Dataset {
  Matrix x;
  Matrix y;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return x.rows(); }
  std::size_t dim() const noexcept { return x.cols(); }
  bool empty() const noexcept { return x.rows() == 0; }

  std::size_t label(std::size_t row) const { return argmax(y.row(row)); }
  std::vector<std::size_t> labels() const;

  Dataset subset(std::span<const std::size_t> rows) const;

  static Dataset from_labels(Matrix x, std::span<const std::size_t> labels, std::size_t classes);
  // Zero-row dataset with the given shape.
  static Dataset empty_like(std::size_t dim, std::size_t classes);
};

Dataset concat(const Dataset& a, const Dataset& b);
Matrix one_hot(std::span<const std::size_t> labels, std::size_t classes);

struct TrainTest {
  Dataset train;
  Dataset test;
};

struct ClusterSpec {
  std::size_t classes = 3;
  // Training rows per class; the test set gets a quarter of that per class
  // (an 80/20 split of the generated pool).
  std::size_t per_class = 400;
  std::size_t dim = 2;
  double separation = 6.0;
  double std = 1.0;
};

// Class means are the vertices of a regular simplex with edge length
// `separation`; samples are isotropic gaussians around them. Rows are shuffled.
TrainTest gen_gaussian_clusters(const ClusterSpec& spec, Rng& rng);

// The simplex vertices used by gen_gaussian_clusters (one row per class).
Matrix simplex_means(std::size_t classes, std::size_t dim, double separation);

// Header-less CSV: feature columns then an integer label column.
// `classes` = 0 infers max label + 1.
Dataset load_csv(const std::filesystem::path& path, std::size_t classes = 0);
void write_csv(const Dataset& data, const std::filesystem::path& path);

// IDX images (magic 0x00000803) and labels (magic 0x00000801). Pixels are
// scaled to [0,1]. When `subsample` is non-zero, that many rows are drawn
// without replacement in a seeded order.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t subsample, Rng& rng, std::size_t classes = 10);

enum class SplitMode { class_wise, sample_wise };

struct SplitSpec {
  SplitMode mode = SplitMode::class_wise;
  std::size_t class_id = 0;
  std::size_t n_forget = 32;
  std::uint64_t seed = 0;
};

struct UnlearningSplit {
  Dataset retained;  // D_r
  Dataset forget;    // D_f
  Dataset test;      // D_t, the full test set
  // Class mode only: test rows of the retained classes and of the forgotten class.
  std::optional<Dataset> retained_test;
  std::optional<Dataset> forget_test;
};

UnlearningSplit split_unlearning(const Dataset& train, const Dataset& test, const SplitSpec& spec);

// One mini-batch. Rows [0, retained) come from D_r, the rest from D_f.
struct BatchSplit {
  Matrix x;
  Matrix y;
  std::size_t retained = 0;

  std::size_t size() const noexcept { return x.rows(); }
  std::size_t forget() const noexcept { return x.rows() - retained; }
};

// Splits D_r and D_f into ceil(N / batch) mini-batches. Retained and unlearning
// rows are each spread as evenly as possible, so every batch holds at least one
// retained row whenever N_r >= batch count. Each row appears exactly once.
std::vector<BatchSplit> stratified_batches(const Dataset& retained, const Dataset& forget,
                                           std::size_t batch, Rng& rng);

}  // namespace rfau
