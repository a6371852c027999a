#include "refage/core/types.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "refage/core/errors.hpp"

namespace refage {

FeatureMatrix::FeatureMatrix(std::size_t count, std::size_t dim)
    : count_(count), dim_(dim), data_(count * dim, 0.0f) {}

FeatureMatrix::FeatureMatrix(std::size_t count, std::size_t dim, std::vector<float> data)
    : count_(count), dim_(dim), data_(std::move(data)) {
  if (data_.size() != count_ * dim_) {
    throw DatasetError(DatasetError::Kind::kSizeMismatch,
                       "feature payload has " + std::to_string(data_.size()) +
                           " entries, expected " + std::to_string(count_ * dim_));
  }
}

bool FeatureMatrix::all_finite() const {
  for (float v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace {

[[noreturn]] void violation(const std::string& msg) {
  throw DatasetError(DatasetError::Kind::kInvariantViolation, msg);
}

}  // namespace

void Dataset::validate() const {
  if (header.format_version != kFormatVersion) {
    throw DatasetError(DatasetError::Kind::kUnknownVersion,
                       "unknown format version " + std::to_string(header.format_version));
  }
  if (header.age_lo >= header.age_hi) violation("age range is empty");
  if (records.size() != header.count) violation("record count differs from header count");
  if (features.count() != header.count) violation("feature count differs from header count");
  if (features.count() > 0 && features.dim() != header.dim) violation("feature dim differs from header dim");
  if (!features.all_finite()) {
    throw DatasetError(DatasetError::Kind::kNonFinite, "feature matrix contains non-finite entries");
  }
  if (header.tokens_per_image > 0) {
    if (tokens.count() != header.count * header.tokens_per_image) violation("token count mismatch");
    if (tokens.count() > 0 && tokens.dim() != header.dim) violation("token dim mismatch");
    if (!tokens.all_finite()) {
      throw DatasetError(DatasetError::Kind::kNonFinite, "token store contains non-finite entries");
    }
  } else if (!tokens.empty()) {
    violation("tokens present but header declares none");
  }
  std::set<std::int64_t> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.age_years < header.age_lo || r.age_years > header.age_hi) {
      std::ostringstream os;
      os << "record " << i << " (image " << r.image_id << ") age " << r.age_years << " outside ["
         << header.age_lo << ", " << header.age_hi << "]";
      violation(os.str());
    }
    if (r.feature_row >= features.count()) violation("record " + std::to_string(i) + " feature_row out of range");
    if (!(r.quality > 0.0 && r.quality <= 1.0)) violation("record " + std::to_string(i) + " quality outside (0,1]");
    if (!seen.insert(r.image_id).second) violation("duplicate image_id " + std::to_string(r.image_id));
  }
}

IdentityIndex IdentityIndex::build(const Dataset& ds) {
  IdentityIndex idx;
  for (std::size_t row = 0; row < ds.records.size(); ++row) {
    auto [it, inserted] = idx.rows_of.try_emplace(ds.records[row].identity_id);
    if (inserted) idx.identities.push_back(ds.records[row].identity_id);
    it->second.push_back(row);
  }
  std::sort(idx.identities.begin(), idx.identities.end());
  return idx;
}

std::unordered_map<std::int64_t, std::size_t> image_row_index(const Dataset& ds) {
  std::unordered_map<std::int64_t, std::size_t> out;
  out.reserve(ds.records.size());
  for (std::size_t row = 0; row < ds.records.size(); ++row) out.emplace(ds.records[row].image_id, row);
  return out;
}

std::string to_string(SwapMode mode) {
  switch (mode) {
    case SwapMode::kNone: return "same";
    case SwapMode::kMix: return "mix";
    case SwapMode::kSingle: return "single";
  }
  return "same";
}

SwapMode swap_mode_from_string(const std::string& s) {
  if (s == "same" || s == "none") return SwapMode::kNone;
  if (s == "mix") return SwapMode::kMix;
  if (s == "single") return SwapMode::kSingle;
  throw std::invalid_argument("unknown swap mode '" + s + "'");
}

}  // namespace refage
