#include "migkit/curation.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

namespace migkit {

const char* to_string(Complexity c) {
  switch (c) {
    case Complexity::kSimple: return "simple";
    case Complexity::kModerate: return "moderate";
    case Complexity::kComplex: return "complex";
  }
  return "?";
}

Complexity classify_complexity(int n) {
  if (n < 1) throw std::invalid_argument("complexity needs at least one instance");
  if (n <= 3) return Complexity::kSimple;
  if (n <= 7) return Complexity::kModerate;
  return Complexity::kComplex;
}

Complexity classify_complexity(const AnnotationRecord& rec) {
  return classify_complexity(static_cast<int>(rec.instances.size()));
}

double combine_score(int n, double c, double p_a, double p_o, const ScoreWeights& w) {
  if (n < 1) throw RecordError("no_instances", "score needs at least one instance");
  return 100.0 * (c / n - w.lambda_a * p_a - w.lambda_o * p_o);
}

double overlap_penalty(int n, double pair_iou_sum, const ScoreWeights& w) {
  if (n < 2) return 0.0;
  const double pairs = static_cast<double>(n) * (n - 1);
  return pair_iou_sum / (w.pair_count_normalization ? pairs / 2.0 : pairs);
}

double pixel_iou(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  const double area_a = (a[2] - a[0]) * (a[3] - a[1]);
  const double area_b = (b[2] - b[0]) * (b[3] - b[1]);
  if (!(area_a > 0.0 && area_b > 0.0)) throw std::invalid_argument("pixel_iou: zero-area box");
  const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (area_a + area_b - inter);
}

namespace {

void check_record(const AnnotationRecord& rec) {
  if (rec.width < 1 || rec.height < 1) throw RecordError("invalid_size", "image width and height must be >= 1");
  if (rec.instances.empty()) throw RecordError("no_instances", "record has no instances");
  for (size_t i = 0; i < rec.instances.size(); ++i) {
    const auto& inst = rec.instances[i];
    const auto& b = inst.bbox;
    const std::string where = "instance " + std::to_string(i);
    for (double v : b)
      if (!std::isfinite(v)) throw RecordError("invalid_bbox", where + ": non-finite coordinate");
    if (b[0] >= b[2] || b[1] >= b[3]) throw RecordError("zero_area_bbox", where + ": box has zero area");
    if (b[0] < 0 || b[1] < 0 || b[2] > rec.width || b[3] > rec.height)
      throw RecordError("bbox_out_of_bounds", where + ": box leaves the image");
    if (inst.confidence && !(*inst.confidence > 0.0 && *inst.confidence <= 1.0))
      throw RecordError("invalid_confidence", where + ": confidence must lie in (0,1]");
  }
}

}  // namespace

ScoreReport score_record(const AnnotationRecord& rec, const ScoreWeights& w, double threshold) {
  check_record(rec);
  ScoreReport r;
  r.n = static_cast<int>(rec.instances.size());
  const double image_area = static_cast<double>(rec.width) * rec.height;
  double area_sum = 0.0, iou_sum = 0.0;
  for (int i = 0; i < r.n; ++i) {
    const auto& a = rec.instances[i];
    r.c += a.confidence.value_or(1.0);
    area_sum += (a.bbox[2] - a.bbox[0]) * (a.bbox[3] - a.bbox[1]) / image_area;
    for (int j = i + 1; j < r.n; ++j) iou_sum += pixel_iou(a.bbox, rec.instances[j].bbox);
  }
  r.p_a = area_sum / r.n;
  r.p_o = overlap_penalty(r.n, iou_sum, w);
  r.total = combine_score(r.n, r.c, r.p_a, r.p_o, w);
  r.high_quality = r.total >= threshold;
  r.complexity = classify_complexity(r.n);
  return r;
}

AnnotationRecord record_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw RecordError("malformed", "record is not a JSON object");
  AnnotationRecord rec;
  try {
    rec.image_id = j.value("image_id", std::string{});
    rec.width = j.at("width").get<int>();
    rec.height = j.at("height").get<int>();
    rec.global_caption = j.value("global_caption", std::string{});
    for (const auto& ji : j.at("instances")) {
      AnnotatedInstance inst;
      inst.caption = ji.value("caption", std::string{});
      const auto& jb = ji.at("bbox");
      if (!jb.is_array() || jb.size() != 4) throw RecordError("invalid_bbox", "bbox must have four coordinates");
      for (int k = 0; k < 4; ++k) inst.bbox[k] = jb[k].get<double>();
      if (ji.contains("confidence") && !ji["confidence"].is_null()) inst.confidence = ji["confidence"].get<double>();
      rec.instances.push_back(std::move(inst));
    }
  } catch (const nlohmann::json::exception& e) {
    throw RecordError("malformed", e.what());
  }
  return rec;
}

nlohmann::json record_to_json(const AnnotationRecord& rec) {
  nlohmann::json j;
  j["image_id"] = rec.image_id;
  j["width"] = rec.width;
  j["height"] = rec.height;
  j["global_caption"] = rec.global_caption;
  j["instances"] = nlohmann::json::array();
  for (const auto& inst : rec.instances) {
    nlohmann::json ji{{"caption", inst.caption}, {"bbox", inst.bbox}};
    if (inst.confidence) ji["confidence"] = *inst.confidence;
    j["instances"].push_back(std::move(ji));
  }
  return j;
}

nlohmann::json report_to_json(const ScoreReport& r) {
  return {{"n", r.n},         {"c", r.c},
          {"p_a", r.p_a},     {"p_o", r.p_o},
          {"total", r.total}, {"verdict", r.high_quality ? "high" : "low"},
          {"complexity", to_string(r.complexity)}};
}

nlohmann::json FilterStats::to_json() const {
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [lo, n] : histogram) hist[std::to_string(lo)] = n;
  nlohmann::json per_class = nlohmann::json::object();
  for (const char* k : {"simple", "moderate", "complex"}) {
    auto it = per_complexity.find(k);
    per_class[k] = it == per_complexity.end() ? 0 : it->second;
  }
  return {{"records", records},
          {"kept", kept},
          {"rejected", rejected},
          {"defaulted_confidences", defaulted_confidences},
          {"per_complexity", per_class},
          {"score_histogram", hist},
          {"rejection_reasons", rejection_reasons}};
}

FilterStats filter_dataset(std::istream& in, std::ostream& kept, std::ostream& rejected, const FilterOptions& opt) {
  FilterStats st;
  std::string line;
  int64_t line_no = 0;
  auto reject = [&](const std::string& reason, const std::string& detail, const nlohmann::json& record) {
    ++st.rejected;
    ++st.rejection_reasons[reason];
    rejected << nlohmann::json{{"line", line_no}, {"reason", reason}, {"detail", detail}, {"record", record}}.dump()
             << '\n';
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++st.records;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      reject("malformed", "invalid JSON", line);
      continue;
    }
    ScoreReport r;
    int64_t defaulted = 0;
    try {
      const AnnotationRecord rec = record_from_json(j);
      r = score_record(rec, opt.weights, opt.threshold);
      for (const auto& inst : rec.instances) defaulted += inst.confidence ? 0 : 1;
    } catch (const RecordError& e) {
      reject(e.reason(), e.what(), j);
      continue;
    }
    st.defaulted_confidences += defaulted;
    ++st.per_complexity[to_string(r.complexity)];
    ++st.histogram[static_cast<int>(std::floor(r.total / 5.0)) * 5];
    if (r.high_quality) {
      ++st.kept;
      j["score"] = report_to_json(r);
      kept << j.dump() << '\n';
    } else {
      nlohmann::json rec = j;
      rec["score"] = report_to_json(r);
      reject("low_score", "total below threshold", rec);
    }
  }
  return st;
}

}  // namespace migkit
