#include "migkit/layout.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>

namespace migkit {

const char* to_string(BBoxViolation v) {
  switch (v) {
    case BBoxViolation::kNone: return "ok";
    case BBoxViolation::kNonFinite: return "non-finite coordinate";
    case BBoxViolation::kX1Negative: return "x1 < 0";
    case BBoxViolation::kEmptyWidth: return "x1 >= x2 (zero or negative width)";
    case BBoxViolation::kX2AboveOne: return "x2 > 1";
    case BBoxViolation::kY1Negative: return "y1 < 0";
    case BBoxViolation::kEmptyHeight: return "y1 >= y2 (zero or negative height)";
    case BBoxViolation::kY2AboveOne: return "y2 > 1";
  }
  return "unknown";
}

BBoxVerdict validate_bbox(const BBox& b) {
  if (!std::isfinite(b.x1) || !std::isfinite(b.y1) || !std::isfinite(b.x2) || !std::isfinite(b.y2))
    return {BBoxViolation::kNonFinite};
  if (b.x1 < 0.0) return {BBoxViolation::kX1Negative};
  if (!(b.x1 < b.x2)) return {BBoxViolation::kEmptyWidth};
  if (b.x2 > 1.0) return {BBoxViolation::kX2AboveOne};
  if (b.y1 < 0.0) return {BBoxViolation::kY1Negative};
  if (!(b.y1 < b.y2)) return {BBoxViolation::kEmptyHeight};
  if (b.y2 > 1.0) return {BBoxViolation::kY2AboveOne};
  return {};
}

double bbox_iou(const BBox& a, const BBox& b) {
  for (const BBox* x : {&a, &b})
    if (auto v = validate_bbox(*x); !v)
      throw std::invalid_argument(std::string("bbox_iou: invalid box: ") + to_string(v.violation));
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

int Layout::active_count() const {
  return static_cast<int>(std::count_if(instances.begin(), instances.end(), [](const auto& i) { return i.active; }));
}

std::vector<const InstanceSpec*> Layout::active() const {
  std::vector<const InstanceSpec*> out;
  for (const auto& i : instances)
    if (i.active) out.push_back(&i);
  return out;
}

Layout Layout::padded() const {
  if (n_max < 1) throw std::invalid_argument("layout n_max must be positive");
  Layout out{global_caption, {}, n_max};
  for (const auto* i : active()) out.instances.push_back(*i);
  if (static_cast<int>(out.instances.size()) > n_max)
    throw LayoutError(LayoutErrorCode::kTooManyInstances,
                      std::to_string(out.instances.size()) + " instances exceed n_max=" + std::to_string(n_max));
  while (static_cast<int>(out.instances.size()) < n_max) out.instances.push_back(InstanceSpec::padding());
  return out;
}

const char* to_string(LayoutErrorCode c) {
  switch (c) {
    case LayoutErrorCode::kSyntax: return "syntax";
    case LayoutErrorCode::kCoordinateCount: return "coordinate_count";
    case LayoutErrorCode::kInvalidBBox: return "invalid_bbox";
    case LayoutErrorCode::kEmptyLayout: return "empty_layout";
    case LayoutErrorCode::kTooManyInstances: return "too_many_instances";
  }
  return "unknown";
}

LayoutError::LayoutError(LayoutErrorCode code, std::string message, std::size_t offset, int instance)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), offset_(offset),
      instance_(instance) {}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

class Parser {
 public:
  explicit Parser(std::string_view s) : s_(s) {}

  Layout run() {
    Layout out;
    const auto open = s_.find('<');
    if (open == std::string_view::npos) fail("expected <layout>");
    out.global_caption = std::string(trim(s_.substr(0, open)));
    pos_ = open;
    expect("<layout>");
    skip_ws();
    while (peek("<scap>")) {
      const int index = static_cast<int>(out.instances.size());
      InstanceSpec inst;
      expect("<scap>");
      const auto text_begin = pos_;
      const auto text_end = s_.find('<', pos_);
      if (text_end == std::string_view::npos) fail("unterminated <scap>");
      inst.caption = std::string(trim(s_.substr(text_begin, text_end - text_begin)));
      pos_ = text_end;
      expect("</scap>");
      skip_ws();
      expect("<bbox>");
      inst.bbox = parse_coords(index);
      expect("</bbox>");
      skip_ws();
      if (auto v = validate_bbox(inst.bbox); !v)
        throw LayoutError(LayoutErrorCode::kInvalidBBox,
                          "instance " + std::to_string(index) + ": " + to_string(v.violation), pos_, index);
      out.instances.push_back(std::move(inst));
    }
    if (out.instances.empty() && peek("</layout>"))
      throw LayoutError(LayoutErrorCode::kEmptyLayout, "layout has zero instances", pos_);
    expect("</layout>");
    skip_ws();
    if (pos_ != s_.size()) fail("trailing content after </layout>");
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw LayoutError(LayoutErrorCode::kSyntax, what + " at byte " + std::to_string(pos_), pos_);
  }

  void skip_ws() {
    while (pos_ < s_.size() && is_space(s_[pos_])) ++pos_;
  }

  bool peek(std::string_view tok) const { return s_.substr(pos_, tok.size()) == tok; }

  void expect(std::string_view tok) {
    if (!peek(tok)) fail("expected " + std::string(tok));
    pos_ += tok.size();
  }

  BBox parse_coords(int index) {
    const auto start = pos_;
    const auto end = s_.find('<', pos_);
    if (end == std::string_view::npos) fail("unterminated <bbox>");
    std::vector<double> vals;
    std::size_t p = pos_;
    while (true) {
      while (p < end && is_space(s_[p])) ++p;
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(s_.data() + p, s_.data() + end, v);
      if (ec != std::errc()) {
        pos_ = p;
        fail("expected a number");
      }
      vals.push_back(v);
      p = static_cast<std::size_t>(ptr - s_.data());
      while (p < end && is_space(s_[p])) ++p;
      if (p == end) break;
      if (s_[p] != ',') {
        pos_ = p;
        fail("expected ',' between coordinates");
      }
      ++p;
    }
    if (vals.size() != 4)
      throw LayoutError(LayoutErrorCode::kCoordinateCount,
                        "instance " + std::to_string(index) + ": expected 4 coordinates, got " +
                            std::to_string(vals.size()),
                        start, index);
    pos_ = end;
    return {vals[0], vals[1], vals[2], vals[3]};
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

double quantize(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  double out = 0.0;
  std::from_chars(buf, buf + std::char_traits<char>::length(buf), out);
  return out;
}

}  // namespace

Layout parse_layout_text(std::string_view text) { return Parser(text).run(); }

Layout quantize_layout(const Layout& layout) {
  Layout out = layout;
  for (auto& i : out.instances) {
    if (!i.active) continue;
    i.bbox = {quantize(i.bbox.x1), quantize(i.bbox.y1), quantize(i.bbox.x2), quantize(i.bbox.y2)};
  }
  return out;
}

std::string serialize_layout(const Layout& layout) {
  const auto act = layout.active();
  if (act.empty()) throw LayoutError(LayoutErrorCode::kEmptyLayout, "cannot serialize a layout with zero instances");
  std::string out;
  if (!layout.global_caption.empty()) {
    if (layout.global_caption.find('<') != std::string::npos)
      throw LayoutError(LayoutErrorCode::kSyntax, "global caption may not contain '<'");
    out += layout.global_caption;
    out += ' ';
  }
  out += "<layout>";
  for (std::size_t i = 0; i < act.size(); ++i) {
    const auto& inst = *act[i];
    if (inst.caption.find('<') != std::string::npos)
      throw LayoutError(LayoutErrorCode::kSyntax, "caption may not contain '<'", 0, static_cast<int>(i));
    const BBox q{quantize(inst.bbox.x1), quantize(inst.bbox.y1), quantize(inst.bbox.x2), quantize(inst.bbox.y2)};
    if (auto v = validate_bbox(q); !v)
      throw LayoutError(LayoutErrorCode::kInvalidBBox,
                        "instance " + std::to_string(i) + " after quantization: " + to_string(v.violation), 0,
                        static_cast<int>(i));
    char buf[160];
    std::snprintf(buf, sizeof buf, "<bbox>%.3f,%.3f,%.3f,%.3f</bbox>", inst.bbox.x1, inst.bbox.y1, inst.bbox.x2,
                  inst.bbox.y2);
    out += "<scap>" + inst.caption + "</scap>" + buf;
  }
  out += "</layout>";
  return out;
}

double layout_validity_score(const Layout& layout) {
  const auto act = layout.active();
  if (act.empty()) return 0.0;
  int ok = 0;
  for (const auto* i : act)
    if (validate_bbox(i->bbox) && !i->caption.empty()) ++ok;
  return static_cast<double>(ok) / static_cast<double>(act.size());
}

nlohmann::json layout_to_json(const Layout& layout) {
  nlohmann::json j;
  j["global_caption"] = layout.global_caption;
  j["instances"] = nlohmann::json::array();
  for (const auto* i : layout.active())
    j["instances"].push_back({{"caption", i->caption}, {"bbox", {i->bbox.x1, i->bbox.y1, i->bbox.x2, i->bbox.y2}}});
  return j;
}

Layout layout_from_json(const nlohmann::json& j) {
  Layout out;
  out.global_caption = j.value("global_caption", std::string{});
  if (!j.contains("instances") || !j["instances"].is_array())
    throw LayoutError(LayoutErrorCode::kSyntax, "layout JSON requires an \"instances\" array");
  int index = 0;
  for (const auto& ij : j["instances"]) {
    InstanceSpec inst;
    inst.caption = ij.value("caption", std::string{});
    const auto& bb = ij.at("bbox");
    if (!bb.is_array() || bb.size() != 4)
      throw LayoutError(LayoutErrorCode::kCoordinateCount,
                        "instance " + std::to_string(index) + ": bbox must have 4 coordinates", 0, index);
    inst.bbox = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
    if (auto v = validate_bbox(inst.bbox); !v)
      throw LayoutError(LayoutErrorCode::kInvalidBBox,
                        "instance " + std::to_string(index) + ": " + to_string(v.violation), 0, index);
    inst.confidence = ij.value("confidence", 1.0);
    out.instances.push_back(std::move(inst));
    ++index;
  }
  if (out.instances.empty()) throw LayoutError(LayoutErrorCode::kEmptyLayout, "layout has zero instances");
  return out;
}

}  // namespace migkit
