#include "rfau/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>

#include "rfau/error.hpp"

namespace rfau {

std::vector<std::size_t> Dataset::labels() const {
  std::vector<std::size_t> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = label(i);
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out{Matrix(rows.size(), dim()), Matrix(rows.size(), classes), classes};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw ShapeError("Dataset::subset: row index out of range");
    std::ranges::copy(x.row(rows[i]), out.x.row(i).begin());
    std::ranges::copy(y.row(rows[i]), out.y.row(i).begin());
  }
  return out;
}

Dataset Dataset::from_labels(Matrix x, std::span<const std::size_t> labels, std::size_t classes) {
  if (labels.size() != x.rows()) throw ShapeError("Dataset: label count does not match rows");
  return Dataset{std::move(x), one_hot(labels, classes), classes};
}

Dataset Dataset::empty_like(std::size_t dim, std::size_t classes) {
  return Dataset{Matrix(0, dim), Matrix(0, classes), classes};
}

Matrix one_hot(std::span<const std::size_t> labels, std::size_t classes) {
  Matrix y(labels.size(), classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw ShapeError("one_hot: label out of range");
    y(i, labels[i]) = 1.0;
  }
  return y;
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.dim() != b.dim() || a.classes != b.classes) {
    throw ShapeError("concat: datasets have different shapes");
  }
  std::vector<double> xs(a.x.values().begin(), a.x.values().end());
  xs.insert(xs.end(), b.x.values().begin(), b.x.values().end());
  std::vector<double> ys(a.y.values().begin(), a.y.values().end());
  ys.insert(ys.end(), b.y.values().begin(), b.y.values().end());
  const std::size_t n = a.size() + b.size();
  return Dataset{Matrix(n, a.dim(), std::move(xs)), Matrix(n, a.classes, std::move(ys)), a.classes};
}

Matrix simplex_means(std::size_t classes, std::size_t dim, double separation) {
  if (classes < 2) throw ConfigError("simplex_means: need at least 2 classes");
  if (dim + 1 < classes) {
    throw ConfigError("simplex_means: dim " + std::to_string(dim) + " cannot hold a simplex of " +
                      std::to_string(classes) + " classes (need dim >= classes - 1)");
  }
  // Orthonormal basis of the sum-zero subspace of R^k via Gram-Schmidt on e_i - e_k.
  const std::size_t k = classes;
  std::vector<Vector> basis;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    Vector v(k, 0.0);
    v[i] = 1.0;
    v[k - 1] = -1.0;
    for (const Vector& b : basis) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += v[j] * b[j];
      for (std::size_t j = 0; j < k; ++j) v[j] -= dot * b[j];
    }
    const double n = l2_norm(v);
    for (double& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  // Vertices e_i have pairwise distance sqrt(2); project and rescale.
  const double scale = separation / std::sqrt(2.0);
  Matrix means(k, dim);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t d = 0; d < basis.size(); ++d) means(c, d) = scale * basis[d][c];
  }
  return means;
}

TrainTest gen_gaussian_clusters(const ClusterSpec& spec, Rng& rng) {
  std::vector<std::string> errors;
  if (spec.classes < 2) errors.push_back("classes must be >= 2");
  if (spec.per_class < 2) errors.push_back("per_class must be >= 2");
  if (!(spec.separation > 0.0)) errors.push_back("separation must be > 0");
  if (!(spec.std >= 0.0)) errors.push_back("std must be >= 0");
  if (spec.dim == 0) errors.push_back("dim must be >= 1");
  if (!errors.empty()) {
    std::string msg = "gen_gaussian_clusters:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw ConfigError(msg);
  }
  const Matrix means = simplex_means(spec.classes, spec.dim, spec.separation);
  const std::size_t test_per_class = std::max<std::size_t>(1, (spec.per_class + 2) / 4);

  auto draw = [&](std::size_t per_class) {
    const std::size_t n = per_class * spec.classes;
    Matrix x(n, spec.dim);
    std::vector<std::size_t> labels(n);
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.classes; ++c) {
      for (std::size_t i = 0; i < per_class; ++i, ++row) {
        labels[row] = c;
        for (std::size_t d = 0; d < spec.dim; ++d) x(row, d) = rng.normal(means(c, d), spec.std);
      }
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    return Dataset::from_labels(std::move(x), labels, spec.classes).subset(order);
  };

  TrainTest out;
  out.train = draw(spec.per_class);
  out.test = draw(test_per_class);
  return out;
}

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, std::size_t classes) {
  const std::string text = read_file(path);
  std::vector<double> xs;
  std::vector<std::size_t> labels;
  std::size_t cols = 0;
  std::size_t offset = 0;
  std::size_t line_no = 0;

  while (offset < text.size()) {
    std::size_t end = text.find('\n', offset);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + offset, end - offset);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    ++line_no;
    const std::size_t line_offset = offset;
    offset = end + 1;
    if (line.empty()) continue;

    auto fail = [&](const std::string& why) {
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + " (byte offset " +
                        std::to_string(line_offset) + "): " + why);
    };

    std::vector<std::string_view> fields;
    std::size_t pos = 0;
    while (true) {
      std::size_t comma = line.find(',', pos);
      fields.push_back(line.substr(pos, comma == std::string_view::npos ? line.npos : comma - pos));
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
    if (fields.size() < 2) fail("expected at least one feature and a label");
    if (cols == 0) cols = fields.size();
    if (fields.size() != cols) {
      fail("expected " + std::to_string(cols) + " columns, found " + std::to_string(fields.size()));
    }
    for (std::size_t i = 0; i + 1 < fields.size(); ++i) {
      double v = 0.0;
      auto f = fields[i];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size() || !std::isfinite(v)) {
        fail("bad number '" + std::string(f) + "' in column " + std::to_string(i));
      }
      xs.push_back(v);
    }
    auto lf = fields.back();
    std::size_t label = 0;
    auto [ptr, ec] = std::from_chars(lf.data(), lf.data() + lf.size(), label);
    if (ec != std::errc() || ptr != lf.data() + lf.size()) {
      fail("label '" + std::string(lf) + "' is not a non-negative integer");
    }
    if (classes != 0 && label >= classes) {
      fail("label " + std::to_string(label) + " out of range for " + std::to_string(classes) +
           " classes");
    }
    labels.push_back(label);
  }
  if (labels.empty()) throw FormatError(path.string() + ": no rows");
  if (classes == 0) classes = *std::max_element(labels.begin(), labels.end()) + 1;
  const std::size_t n = labels.size();
  return Dataset::from_labels(Matrix(n, cols - 1, std::move(xs)), labels, classes);
}

void write_csv(const Dataset& data, const std::filesystem::path& path) {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.x.row(i)) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      out.append(buf, ptr);
      out.push_back(',');
    }
    out += std::to_string(data.label(i));
    out.push_back('\n');
  }
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << out;
  if (!f) throw IoError("write failed for " + path.string());
}

namespace {

std::uint32_t read_be32(const std::string& bytes, std::size_t offset, const std::string& name) {
  if (offset + 4 > bytes.size()) {
    throw FormatError(name + ": truncated header at byte offset " + std::to_string(offset));
  }
  auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[offset + i])); };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

std::string hex32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof(buf), "0x%08X", v);
  return buf;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t subsample, Rng& rng, std::size_t classes) {
  const std::string img = read_file(images);
  const std::string lab = read_file(labels);
  const std::string iname = images.string();
  const std::string lname = labels.string();

  constexpr std::uint32_t kImageMagic = 0x00000803;
  constexpr std::uint32_t kLabelMagic = 0x00000801;
  const std::uint32_t img_magic = read_be32(img, 0, iname);
  if (img_magic != kImageMagic) {
    throw FormatError(iname + ": bad magic at byte offset 0: expected " + hex32(kImageMagic) +
                      ", found " + hex32(img_magic));
  }
  const std::uint32_t lab_magic = read_be32(lab, 0, lname);
  if (lab_magic != kLabelMagic) {
    throw FormatError(lname + ": bad magic at byte offset 0: expected " + hex32(kLabelMagic) +
                      ", found " + hex32(lab_magic));
  }
  const std::size_t n = read_be32(img, 4, iname);
  const std::size_t rows = read_be32(img, 8, iname);
  const std::size_t cols = read_be32(img, 12, iname);
  const std::size_t n_labels = read_be32(lab, 4, lname);
  if (n_labels != n) {
    throw FormatError(lname + ": byte offset 4: label count " + std::to_string(n_labels) +
                      " does not match image count " + std::to_string(n));
  }
  const std::size_t pixels = rows * cols;
  if (pixels == 0) throw FormatError(iname + ": byte offset 8: zero-sized images");
  if (img.size() != 16 + n * pixels) {
    throw FormatError(iname + ": expected " + std::to_string(16 + n * pixels) + " bytes, found " +
                      std::to_string(img.size()));
  }
  if (lab.size() != 8 + n) {
    throw FormatError(lname + ": expected " + std::to_string(8 + n) + " bytes, found " +
                      std::to_string(lab.size()));
  }
  if (subsample > n) {
    throw ConfigError("load_idx: subsample " + std::to_string(subsample) + " exceeds " +
                      std::to_string(n) + " rows");
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::size_t take = n;
  if (subsample != 0) {
    rng.shuffle(order);
    take = subsample;
  }

  Matrix x(take, pixels);
  std::vector<std::size_t> ys(take);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t src = order[i];
    const std::size_t label_offset = 8 + src;
    const auto label = static_cast<unsigned char>(lab[label_offset]);
    if (label >= classes) {
      throw FormatError(lname + ": byte offset " + std::to_string(label_offset) + ": label " +
                        std::to_string(label) + " out of range for " + std::to_string(classes) +
                        " classes");
    }
    ys[i] = label;
    const std::size_t base = 16 + src * pixels;
    for (std::size_t p = 0; p < pixels; ++p) {
      x(i, p) = static_cast<unsigned char>(img[base + p]) / 255.0;
    }
  }
  return Dataset::from_labels(std::move(x), ys, classes);
}

UnlearningSplit split_unlearning(const Dataset& train, const Dataset& test, const SplitSpec& spec) {
  UnlearningSplit out;
  out.test = test;
  if (spec.mode == SplitMode::class_wise) {
    if (spec.class_id >= train.classes) {
      throw ConfigError("split: class_id " + std::to_string(spec.class_id) + " >= class count " +
                        std::to_string(train.classes));
    }
    auto partition = [&](const Dataset& d, Dataset& keep, Dataset& drop) {
      std::vector<std::size_t> k, f;
      for (std::size_t i = 0; i < d.size(); ++i) (d.label(i) == spec.class_id ? f : k).push_back(i);
      keep = d.subset(k);
      drop = d.subset(f);
    };
    partition(train, out.retained, out.forget);
    if (out.forget.empty()) {
      throw ConfigError("split: class " + std::to_string(spec.class_id) + " has no training rows");
    }
    Dataset rt, ft;
    partition(test, rt, ft);
    out.retained_test = std::move(rt);
    out.forget_test = std::move(ft);
    return out;
  }

  if (spec.n_forget < 1 || spec.n_forget >= train.size()) {
    throw ConfigError("split: n_forget must be in [1, " + std::to_string(train.size()) + ")");
  }
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);
  std::vector<std::size_t> forget(order.begin(), order.begin() + spec.n_forget);
  std::vector<std::size_t> keep(order.begin() + spec.n_forget, order.end());
  std::ranges::sort(forget);
  std::ranges::sort(keep);
  out.retained = train.subset(keep);
  out.forget = train.subset(forget);
  return out;
}

namespace {

// Splits `total` into `parts` counts differing by at most one; the larger
// counts go first when `front` is true, last otherwise.
std::vector<std::size_t> even_counts(std::size_t total, std::size_t parts, bool front) {
  std::vector<std::size_t> counts(parts, total / parts);
  const std::size_t extra = total % parts;
  for (std::size_t i = 0; i < extra; ++i) counts[front ? i : parts - 1 - i] += 1;
  return counts;
}

}  // namespace

std::vector<BatchSplit> stratified_batches(const Dataset& retained, const Dataset& forget,
                                           std::size_t batch, Rng& rng) {
  if (batch < 2) throw ConfigError("stratified_batches: batch must be >= 2");
  const std::size_t n_r = retained.size();
  const std::size_t n_f = forget.size();
  const std::size_t n = n_r + n_f;
  if (n == 0) throw EmptyInputError("stratified_batches: no rows");
  if (batch > n) {
    throw ConfigError("stratified_batches: batch " + std::to_string(batch) + " exceeds " +
                      std::to_string(n) + " rows");
  }
  if (n_f > 0 && n_r > 0 && (retained.dim() != forget.dim() || retained.classes != forget.classes)) {
    throw ShapeError("stratified_batches: D_r and D_f shapes differ");
  }
  const Dataset& shape = n_r > 0 ? retained : forget;

  const std::size_t batches = (n + batch - 1) / batch;
  std::vector<std::size_t> r_idx(n_r), f_idx(n_f);
  for (std::size_t i = 0; i < n_r; ++i) r_idx[i] = i;
  for (std::size_t i = 0; i < n_f; ++i) f_idx[i] = i;
  rng.shuffle(r_idx);
  rng.shuffle(f_idx);

  const auto r_counts = even_counts(n_r, batches, true);
  const auto f_counts = even_counts(n_f, batches, false);

  std::vector<BatchSplit> out;
  out.reserve(batches);
  std::size_t r_pos = 0, f_pos = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t nr = r_counts[b], nf = f_counts[b];
    BatchSplit s{Matrix(nr + nf, shape.dim()), Matrix(nr + nf, shape.classes), nr};
    for (std::size_t i = 0; i < nr; ++i, ++r_pos) {
      std::ranges::copy(retained.x.row(r_idx[r_pos]), s.x.row(i).begin());
      std::ranges::copy(retained.y.row(r_idx[r_pos]), s.y.row(i).begin());
    }
    for (std::size_t i = 0; i < nf; ++i, ++f_pos) {
      std::ranges::copy(forget.x.row(f_idx[f_pos]), s.x.row(nr + i).begin());
      std::ranges::copy(forget.y.row(f_idx[f_pos]), s.y.row(nr + i).begin());
    }
    out.push_back(std::move(s));
  }
  rng.shuffle(out);
  return out;
}

}  // namespace rfau
