#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace rfau {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles. Rows are samples wherever a batch is stored.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  // Bitwise equality of shape and contents.
  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Seeded generator. The bit stream is std::mt19937_64, whose output sequence is
// fixed by the C++ standard; every derived draw (uniform, normal, index,
// shuffle) is computed here rather than through <random> distributions, whose
// algorithms are implementation-defined. Same seed, same draws, any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal();
  double normal(double mean, double std) { return mean + std * normal(); }
  // Uniform integer in [0, n), unbiased (rejection sampling). n must be > 0.
  std::size_t index(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(items[i - 1], items[j]);
    }
  }

  // Independent child stream; used to give sub-procedures their own seeds.
  Rng split();

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Mixes a base seed with a stream tag (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& m);
Matrix& operator+=(Matrix& a, const Matrix& b);
Matrix& operator-=(Matrix& a, const Matrix& b);

// Adds `bias` to every row.
void add_row_vector(Matrix& m, std::span<const double> bias);
// Column sums (the bias gradient of a batch).
Vector column_sums(const Matrix& m);

Matrix softmax_rows(const Matrix& logits);

inline constexpr double kProbClip = 1e-12;

// Mean over rows of -sum_j t_ij * ln(p_ij + 1e-12).
double cross_entropy(const Matrix& probs, const Matrix& targets);
// Per-row -sum_j p ln(p + 1e-12).
Vector entropy_rows(const Matrix& probs);

double l2_norm(std::span<const double> v);
Vector mean_rows(const Matrix& m);
std::size_t argmax(std::span<const double> v);

Matrix gaussian_fill(Rng& rng, std::size_t rows, std::size_t cols, double mean, double std);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for each coordinate.
Vector finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                        std::span<const double> x0, double h);

bool all_finite(std::span<const double> v);

}  // namespace rfau
