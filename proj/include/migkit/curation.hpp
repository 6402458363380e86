#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace migkit {

struct AnnotatedInstance {
  std::string caption;
  std::array<double, 4> bbox{};  // pixels: x1, y1, x2, y2
  std::optional<double> confidence;  // detector score in (0,1]; missing means 1.0
};

struct AnnotationRecord {
  std::string image_id;
  int width = 0, height = 0;
  std::string global_caption;
  std::vector<AnnotatedInstance> instances;
};

enum class Complexity { kSimple, kModerate, kComplex };

const char* to_string(Complexity c);
// 1-3 simple, 4-7 moderate, 8+ complex. Throws for n < 1.
Complexity classify_complexity(int n_instances);
Complexity classify_complexity(const AnnotationRecord& rec);

struct ScoreWeights {
  double lambda_a = 0.3;
  double lambda_o = 0.7;
  // false: unordered-pair IoU sum over N(N-1); true: over N(N-1)/2.
  bool pair_count_normalization = false;
};

struct ScoreReport {
  int n = 0;
  double c = 0.0;    // sum of confidences
  double p_a = 0.0;  // mean area fraction
  double p_o = 0.0;  // overlap penalty
  double total = 0.0;
  bool high_quality = false;
  Complexity complexity = Complexity::kSimple;
};

// Raised for records that cannot be scored.
class RecordError : public std::runtime_error {
 public:
  RecordError(std::string reason, std::string message)
      : std::runtime_error(std::move(message)), reason_(std::move(reason)) {}
  // Short machine-readable tag, e.g. "no_instances".
  const std::string& reason() const { return reason_; }

 private:
  std::string reason_;
};

// The score from its components alone: 100 * (c/n - lambda_a*p_a - lambda_o*p_o).
double combine_score(int n, double c, double p_a, double p_o, const ScoreWeights& w = {});

// p_o from the unordered pairwise IoUs of n boxes.
double overlap_penalty(int n, double pair_iou_sum, const ScoreWeights& w = {});

ScoreReport score_record(const AnnotationRecord& rec, const ScoreWeights& w = {}, double threshold = 60.0);

// Pixel-box IoU; boxes must have positive area.
double pixel_iou(const std::array<double, 4>& a, const std::array<double, 4>& b);

AnnotationRecord record_from_json(const nlohmann::json& j);
nlohmann::json record_to_json(const AnnotationRecord& rec);
nlohmann::json report_to_json(const ScoreReport& r);

struct FilterOptions {
  double threshold = 60.0;
  ScoreWeights weights;
};

struct FilterStats {
  int64_t records = 0;  // non-blank input lines
  int64_t kept = 0;
  int64_t rejected = 0;  // low score plus malformed
  int64_t defaulted_confidences = 0;
  std::map<std::string, int64_t> per_complexity;  // scored records only
  std::map<int, int64_t> histogram;  // lower edge of each 5-point bin
  std::map<std::string, int64_t> rejection_reasons;

  nlohmann::json to_json() const;
};

// Streams JSON-lines records. Kept lines get a "score" object appended;
// every rejected line becomes {"line", "reason", "detail", "record"}.
// Malformed input never aborts the stream.
FilterStats filter_dataset(std::istream& in, std::ostream& kept, std::ostream& rejected, const FilterOptions& opt = {});

}  // namespace migkit
