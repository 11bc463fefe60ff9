#include "rfau/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "rfau/error.hpp"

namespace rfau {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_finite(const Matrix& m, const char* op) {
  if (!all_finite(m.values())) {
    throw NumericError(std::string(op) + ": produced a non-finite value");
  }
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) + " does not match " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // 1 - uniform() lies in (0, 1], so the log is finite.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double radius = std::sqrt(-2.0 * std::log(u1));
  double angle = 2.0 * std::numbers::pi * u2;
  spare_ = radius * std::sin(angle);
  has_spare_ = true;
  return radius * std::cos(angle);
}

std::size_t Rng::index(std::size_t n) {
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t draw;
  do {
    draw = engine_();
  } while (draw >= limit);
  return static_cast<std::size_t>(draw % bound);
}

Rng Rng::split() { return Rng(derive_seed(engine_(), 0x5eed)); }

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a) + " x " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  require_finite(out, "matmul");
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a) + " x " + shape_str(b) + "^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto a_row = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto b_row = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
      out(i, j) = acc;
    }
  }
  require_finite(out, "matmul_nt");
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: " + shape_str(a) + "^T x " + shape_str(b));
  }
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto a_row = a.row(k);
    auto b_row = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = a_row[i];
      if (aki == 0.0) continue;
      auto out_row = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aki * b_row[j];
    }
  }
  require_finite(out, "matmul_tn");
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  out += b;
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  Matrix out = a;
  out -= b;
  return out;
}

Matrix operator*(double s, const Matrix& m) {
  Matrix out = m;
  for (double& v : out.values()) v *= s;
  return out;
}

Matrix& operator+=(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "operator+=");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  return a;
}

Matrix& operator-=(Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "operator-=");
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) av[i] -= bv[i];
  return a;
}

void add_row_vector(Matrix& m, std::span<const double> bias) {
  if (bias.size() != m.cols()) {
    throw ShapeError("add_row_vector: " + std::to_string(bias.size()) + " entries for " +
                     std::to_string(m.cols()) + " columns");
  }
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
}

Vector column_sums(const Matrix& m) {
  Vector out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j];
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto in = logits.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double total = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (double& v : o) v /= total;
  }
  require_finite(out, "softmax_rows");
  return out;
}

double cross_entropy(const Matrix& probs, const Matrix& targets) {
  require_same_shape(probs, targets, "cross_entropy");
  if (probs.rows() == 0) throw EmptyInputError("cross_entropy: no rows");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto p = probs.row(i);
    auto t = targets.row(i);
    for (std::size_t j = 0; j < p.size(); ++j) {
      if (t[j] != 0.0) total -= t[j] * std::log(p[j] + kProbClip);
    }
  }
  return total / static_cast<double>(probs.rows());
}

Vector entropy_rows(const Matrix& probs) {
  if (probs.cols() == 0) throw ShapeError("entropy_rows: zero columns");
  Vector out(probs.rows(), 0.0);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    double h = 0.0;
    for (double p : probs.row(i)) h -= p * std::log(p + kProbClip);
    out[i] = h;
  }
  return out;
}

double l2_norm(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

Vector mean_rows(const Matrix& m) {
  if (m.rows() == 0) throw EmptyInputError("mean_rows: matrix has no rows");
  Vector out = column_sums(m);
  for (double& v : out) v /= static_cast<double>(m.rows());
  return out;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

Matrix gaussian_fill(Rng& rng, std::size_t rows, std::size_t cols, double mean, double std) {
  if (!(std >= 0.0)) throw ConfigError("gaussian_fill: std must be >= 0");
  Matrix out(rows, cols);
  for (double& v : out.values()) v = rng.normal(mean, std);
  return out;
}

Vector finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                        std::span<const double> x0, double h) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step must be > 0");
  Vector x(x0.begin(), x0.end());
  Vector grad(x.size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace rfau
