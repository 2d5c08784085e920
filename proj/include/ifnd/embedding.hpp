#pragma once

#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ifnd/error.hpp"
#include "ifnd/matrix.hpp"
#include "ifnd/text.hpp"

namespace ifnd {

inline constexpr double kUnitNormTolerance = 1e-9;
inline constexpr double kZeroRowThreshold = 1e-12;

/// Temperature of the similarity kernel. Always strictly positive.
class Temperature {
 public:
  explicit Temperature(double tau) : tau_(tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
      throw Error(ErrorCode::InvalidArgument, "temperature must be positive and finite");
    }
  }
  double value() const noexcept { return tau_; }

 private:
  double tau_;
};

inline constexpr double kDefaultTemperature = 0.2;

/// A set of embedding vectors, one per row. The same type carries encoder
/// features and projection outputs; `normalized()` records whether every row
/// is known to be unit length.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  EmbeddingMatrix(std::size_t rows, std::size_t dim, std::vector<double> values,
                  bool normalized = false)
      : rows_(rows), dim_(dim), values_(std::move(values)), normalized_(normalized) {
    if (dim_ == 0) throw Error(ErrorCode::InvalidArgument, "embedding dim must be positive");
    if (values_.size() != rows_ * dim_) {
      throw Error(ErrorCode::ShapeMismatch, "embedding buffer size does not match rows*dim");
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i])) {
        throw Error(ErrorCode::InvalidArgument,
                    "non-finite value in row " + std::to_string(i / dim_));
      }
    }
    if (normalized_) {
      for (std::size_t r = 0; r < rows_; ++r) {
        const double n = std::sqrt(dot(row(r), row(r)));
        if (std::abs(n - 1.0) > kUnitNormTolerance) {
          throw Error(ErrorCode::UnnormalizedInput,
                      "row " + std::to_string(r) + " flagged unit but has norm " +
                          text::format_double(n));
        }
      }
    }
  }

  explicit EmbeddingMatrix(const Matrix& m, bool normalized = false)
      : EmbeddingMatrix(m.rows(), m.cols(), m.data(), normalized) {}

  static EmbeddingMatrix from_rows(const std::vector<std::vector<double>>& rows,
                                   bool normalized = false) {
    if (rows.empty()) throw Error(ErrorCode::InvalidArgument, "from_rows needs at least one row");
    const std::size_t dim = rows.front().size();
    std::vector<double> values;
    values.reserve(rows.size() * dim);
    for (const auto& r : rows) {
      if (r.size() != dim) throw Error(ErrorCode::DimensionMismatch, "ragged rows");
      values.insert(values.end(), r.begin(), r.end());
    }
    return EmbeddingMatrix(rows.size(), dim, std::move(values), normalized);
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t dim() const noexcept { return dim_; }
  bool normalized() const noexcept { return normalized_; }
  const std::vector<double>& values() const noexcept { return values_; }

  std::span<const double> row(std::size_t r) const noexcept {
    return {values_.data() + r * dim_, dim_};
  }
  double operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * dim_ + c]; }

  Matrix to_matrix() const { return Matrix(rows_, dim_, values_); }

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t dim_ = 1;
  std::vector<double> values_;
  bool normalized_ = false;
};

inline EmbeddingMatrix normalize_rows(const EmbeddingMatrix& m) {
  std::vector<double> out(m.values());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double n = std::sqrt(dot(m.row(r), m.row(r)));
    if (n < kZeroRowThreshold) {
      throw Error(ErrorCode::ZeroRow, "row " + std::to_string(r) + " has zero norm");
    }
    for (std::size_t c = 0; c < m.dim(); ++c) out[r * m.dim() + c] /= n;
  }
  return EmbeddingMatrix(m.rows(), m.dim(), std::move(out), true);
}

/// exp(u . v / tau) for unit vectors u, v.
inline double similarity(std::span<const double> u, std::span<const double> v, Temperature tau) {
  if (u.size() != v.size()) {
    throw Error(ErrorCode::DimensionMismatch, "similarity operands differ in dimension");
  }
  return std::exp(dot(u, v) / tau.value());
}

inline Matrix pairwise_similarity(const EmbeddingMatrix& m, Temperature tau) {
  if (!m.normalized()) {
    throw Error(ErrorCode::UnnormalizedInput, "pairwise_similarity needs unit rows");
  }
  Matrix out(m.rows(), m.rows());
  for (std::size_t a = 0; a < m.rows(); ++a) {
    for (std::size_t b = a; b < m.rows(); ++b) {
      const double s = similarity(m.row(a), m.row(b), tau);
      out(a, b) = s;
      out(b, a) = s;
    }
  }
  return out;
}

// Text format: "rows dim" header, then one whitespace-separated row per line.

inline void write_embedding(std::ostream& os, const EmbeddingMatrix& m) {
  os << m.rows() << ' ' << m.dim() << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.dim(); ++c) {
      if (c) os << ' ';
      os << text::format_double(m(r, c));
    }
    os << '\n';
  }
}

inline EmbeddingMatrix read_embedding(std::istream& is) {
  long long rows = -1;
  long long dim = -1;
  if (!(is >> rows >> dim) || rows < 0 || dim <= 0) {
    throw Error(ErrorCode::Parse, "embedding header must be 'rows dim'");
  }
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(rows * dim));
  std::string token;
  for (long long i = 0; i < rows * dim; ++i) {
    if (!(is >> token)) {
      throw Error(ErrorCode::Parse, "embedding file truncated at value " + std::to_string(i));
    }
    values.push_back(text::parse_double(token));
  }
  return EmbeddingMatrix(static_cast<std::size_t>(rows), static_cast<std::size_t>(dim),
                         std::move(values));
}

}  // namespace ifnd
