#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace refage {

/// One photograph reduced to metadata plus a row in the split's FeatureMatrix.
struct ImageRecord {
  std::int64_t image_id = 0;
  std::int64_t identity_id = 0;
  int age_years = 0;
  std::int64_t source_id = 0;
  std::int64_t domain_id = 0;
  double quality = 1.0;
  std::size_t feature_row = 0;

  bool operator==(const ImageRecord&) const = default;
};

/// Dense row-major float32 matrix. Rows are embeddings, one per image (or per
/// token when used as a token store).
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t count, std::size_t dim);
  FeatureMatrix(std::size_t count, std::size_t dim, std::vector<float> data);

  std::size_t count() const { return count_; }
  std::size_t dim() const { return dim_; }
  bool empty() const { return count_ == 0; }

  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * dim_, dim_};
  }
  std::span<float> row(std::size_t i) { return {data_.data() + i * dim_, dim_}; }

  /// Contiguous block of `n` rows starting at `first`.
  std::span<const float> rows(std::size_t first, std::size_t n) const {
    return {data_.data() + first * dim_, n * dim_};
  }

  const std::vector<float>& data() const { return data_; }
  std::vector<float>& data() { return data_; }

  bool all_finite() const;

  bool operator==(const FeatureMatrix&) const = default;

 private:
  std::size_t count_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
};

inline constexpr int kFormatVersion = 1;

struct DatasetHeader {
  std::size_t dim = 0;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::string world_digest;
  std::string split;
  int format_version = kFormatVersion;
  int age_lo = 0;
  int age_hi = 110;
  /// Spatial tokens per image carried alongside the CLS features; 0 when the
  /// dataset has no token store.
  std::size_t tokens_per_image = 0;

  bool operator==(const DatasetHeader&) const = default;
};

/// A split of images. Immutable after load; safe to share read-only.
struct Dataset {
  DatasetHeader header;
  std::vector<ImageRecord> records;
  FeatureMatrix features;
  /// Optional spatial tokens, `count * tokens_per_image` rows of width `dim`.
  /// Tokens of record row r live at rows [r*T, (r+1)*T).
  FeatureMatrix tokens;

  std::size_t size() const { return records.size(); }
  std::size_t dim() const { return header.dim; }
  bool has_tokens() const { return header.tokens_per_image > 0; }

  std::span<const float> feature(std::size_t row) const { return features.row(row); }
  std::span<const float> token_block(std::size_t row) const {
    return tokens.rows(row * header.tokens_per_image, header.tokens_per_image);
  }

  /// Throws DatasetError(kInvariantViolation) describing the first violation.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

/// Rows of each identity, identities in ascending id order.
struct IdentityIndex {
  std::vector<std::int64_t> identities;
  std::unordered_map<std::int64_t, std::vector<std::size_t>> rows_of;

  static IdentityIndex build(const Dataset& ds);
  const std::vector<std::size_t>& rows(std::int64_t identity) const {
    return rows_of.at(identity);
  }
};

/// image_id -> record row.
std::unordered_map<std::int64_t, std::size_t> image_row_index(const Dataset& ds);

/// Predictive distribution in years / years^2.
struct Prediction {
  double mean = 0.0;
  double variance = 1.0;
};

struct ContextEntry {
  std::size_t row = 0;  ///< record row in the dataset the context refers to
  double age = 0.0;     ///< label attached to the reference (may be noisy in training)

  bool operator==(const ContextEntry&) const = default;
};

enum class SwapMode { kNone, kMix, kSingle };

std::string to_string(SwapMode mode);
SwapMode swap_mode_from_string(const std::string& s);

struct ContextSet {
  std::vector<ContextEntry> entries;
  SwapMode swap_mode = SwapMode::kNone;

  std::size_t size() const { return entries.size(); }
};

/// Evaluation tuple: target, pre-sampled ordered reference list, ground truth.
struct Task {
  std::size_t target_row = 0;
  std::int64_t target_image = 0;
  std::int64_t identity_id = 0;
  int target_age = 0;
  ContextSet d_max;
  int trial_index = 0;
  bool cross_source_ok = true;
  /// Per-reference flag set by swap builders when no exact-age candidate existed.
  std::vector<bool> ref_fallback;

  /// First min(n, |d_max|) references, never reordered.
  std::span<const ContextEntry> prefix(std::size_t n) const {
    return std::span<const ContextEntry>(d_max.entries).first(std::min(n, d_max.entries.size()));
  }
};

/// Everything an estimator sees for one prediction.
struct Query {
  const Dataset* data = nullptr;
  std::size_t target_row = 0;
  std::span<const ContextEntry> context;
};

}  // namespace refage
