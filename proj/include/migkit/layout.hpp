#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace migkit {

// Normalized box, origin top-left, x rightward, y downward.
struct BBox {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool operator==(const BBox&) const = default;
};

enum class BBoxViolation {
  kNone,
  kNonFinite,
  kX1Negative,
  kEmptyWidth,  // x1 >= x2
  kX2AboveOne,
  kY1Negative,
  kEmptyHeight,  // y1 >= y2
  kY2AboveOne,
};

const char* to_string(BBoxViolation v);

struct BBoxVerdict {
  BBoxViolation violation = BBoxViolation::kNone;
  bool valid() const { return violation == BBoxViolation::kNone; }
  explicit operator bool() const { return valid(); }
};

// Checks 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1 and reports the first
// violated constraint in that order.
BBoxVerdict validate_bbox(const BBox& b);

// Intersection over union of two valid boxes. Throws std::invalid_argument
// on an invalid input box.
double bbox_iou(const BBox& a, const BBox& b);

struct InstanceSpec {
  std::string caption;
  BBox bbox;
  double confidence = 1.0;
  // Padding slots are inactive: empty caption, zero box.
  bool active = true;

  static InstanceSpec padding() { return InstanceSpec{"", BBox{}, 1.0, false}; }
  bool operator==(const InstanceSpec&) const = default;
};

struct Layout {
  std::string global_caption;
  std::vector<InstanceSpec> instances;
  int n_max = 10;

  int active_count() const;
  std::vector<const InstanceSpec*> active() const;
  // Copy with inactive padding slots appended up to n_max. Throws if the
  // layout has more active instances than n_max.
  Layout padded() const;
  bool operator==(const Layout&) const = default;
};

// ---- layout-token DSL ----------------------------------------------------------
//
//   [global caption] <layout> ( <scap>TEXT</scap> <bbox>x1,y1,x2,y2</bbox> )+ </layout>
//
// Whitespace between tokens is ignored; TEXT may not contain '<'. The
// optional global caption is free text before the opening <layout> tag.

enum class LayoutErrorCode {
  kSyntax,
  kCoordinateCount,
  kInvalidBBox,
  kEmptyLayout,
  kTooManyInstances,
};

const char* to_string(LayoutErrorCode c);

class LayoutError : public std::runtime_error {
 public:
  LayoutError(LayoutErrorCode code, std::string message, std::size_t offset = 0, int instance = -1);

  LayoutErrorCode code() const { return code_; }
  // Byte offset into the parsed text (syntax and coordinate errors).
  std::size_t offset() const { return offset_; }
  // Zero-based instance index, or -1 when not applicable.
  int instance() const { return instance_; }

 private:
  LayoutErrorCode code_;
  std::size_t offset_;
  int instance_;
};

Layout parse_layout_text(std::string_view text);

// Canonical form: coordinates with exactly three decimals, instances in
// stored order, padding slots omitted.
std::string serialize_layout(const Layout& layout);

// Rounds every coordinate the way serialize_layout renders it.
Layout quantize_layout(const Layout& layout);

// Fraction of real instances with a valid box and a non-empty caption; 0 for
// an empty layout.
double layout_validity_score(const Layout& layout);

// ---- JSON record ---------------------------------------------------------------
// {"global_caption": str, "instances": [{"caption": str, "bbox": [x1,y1,x2,y2]}]}
nlohmann::json layout_to_json(const Layout& layout);
Layout layout_from_json(const nlohmann::json& j);

}  // namespace migkit
