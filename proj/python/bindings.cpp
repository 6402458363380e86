#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "migkit/curation.hpp"
#include "migkit/diffusion.hpp"
#include "migkit/eval.hpp"
#include "migkit/gradcheck.hpp"
#include "migkit/image.hpp"
#include "migkit/layout.hpp"
#include "migkit/lora.hpp"
#include "migkit/pipeline.hpp"

namespace py = pybind11;
using nlohmann::json;
using namespace migkit;

namespace {

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::handle& obj) {
  return json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

// A layout is either DSL text or a {"global_caption", "instances"} dict.
Layout layout_arg(const py::object& obj) {
  if (py::isinstance<py::str>(obj)) return parse_layout_text(obj.cast<std::string>());
  return layout_from_json(from_py(obj));
}

py::array_t<uint8_t> image_to_array(const Image& img) {
  py::array_t<uint8_t> a({img.height, img.width, 3});
  std::copy(img.pixels.begin(), img.pixels.end(), a.mutable_data());
  return a;
}

Image array_to_image(const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw std::invalid_argument("expected an (H, W, 3) uint8 array");
  Image img(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

ScoreWeights weights(double lambda_a, double lambda_o, bool pair_normalization) {
  ScoreWeights w;
  w.lambda_a = lambda_a;
  w.lambda_o = lambda_o;
  w.pair_count_normalization = pair_normalization;
  return w;
}

class Model {
 public:
  explicit Model(const std::string& checkpoint)
      : loaded_(load_model(checkpoint)), sched_(loaded_.meta.value("noise_steps", 1000)) {}

  py::array_t<uint8_t> sample(const py::object& layout, double tau, double cfg_scale, int steps, uint64_t seed,
                              const std::string& fusion, bool stochastic) const {
    const Layout l = layout_arg(layout);
    SamplerConfig sc;
    sc.cfg_scale = cfg_scale;
    sc.seed = seed;
    sc.fusion = parse_fusion(fusion);
    sc.deterministic = !stochastic;
    Tensor z;
    {
      py::gil_scoped_release release;
      z = migkit::sample(*loaded_.model, sched_, l, sc, {tau, steps});
    }
    return image_to_array(decode_latent(z, loaded_.meta.value("latent_factor", 4)));
  }

  py::object evaluate(const std::vector<py::object>& layouts, double tau, double cfg_scale, int steps,
                      uint64_t seed) const {
    std::vector<Layout> ls;
    for (const auto& l : layouts) ls.push_back(layout_arg(l));
    SamplerConfig sc;
    sc.cfg_scale = cfg_scale;
    sc.seed = seed;
    EvalReport r;
    {
      py::gil_scoped_release release;
      r = layout_adherence(make_image_sampler(*loaded_.model, sched_, sc, {tau, steps},
                                              loaded_.meta.value("latent_factor", 4)),
                           ls);
    }
    return to_py(r.to_json());
  }

  py::object spec() const { return to_py(loaded_.spec.to_json()); }
  py::object meta() const { return to_py(loaded_.meta); }
  py::object params() const {
    const ParamCount pc = param_count(*loaded_.model);
    return to_py({{"base", pc.base}, {"layout", pc.layout}, {"adapter", pc.adapter}, {"ratio", pc.ratio}});
  }

 private:
  LoadedModel loaded_;
  NoiseSchedule sched_;
};

}  // namespace

PYBIND11_MODULE(_migkit, m) {
  m.doc() = "Layout-guided diffusion toolkit";

  py::register_exception<LayoutError>(m, "LayoutError", PyExc_ValueError);
  py::register_exception<RecordError>(m, "RecordError", PyExc_ValueError);

  m.def("parse_layout", [](const std::string& text) { return to_py(layout_to_json(parse_layout_text(text))); },
        py::arg("text"), "Parse layout DSL text into a dict.");
  m.def("serialize_layout", [](const py::object& layout) { return serialize_layout(layout_arg(layout)); },
        py::arg("layout"), "Canonical DSL text (three decimals).");
  m.def("layout_validity_score", [](const py::object& layout) { return layout_validity_score(layout_arg(layout)); },
        py::arg("layout"));
  m.def("bbox_iou",
        [](std::array<double, 4> a, std::array<double, 4> b) {
          return bbox_iou({a[0], a[1], a[2], a[3]}, {b[0], b[1], b[2], b[3]});
        },
        py::arg("a"), py::arg("b"));

  m.def("score_record",
        [](const py::object& record, double lambda_a, double lambda_o, bool pair_normalization, double threshold) {
          const AnnotationRecord rec = record_from_json(from_py(record));
          return to_py(report_to_json(score_record(rec, weights(lambda_a, lambda_o, pair_normalization), threshold)));
        },
        py::arg("record"), py::arg("lambda_a") = 0.3, py::arg("lambda_o") = 0.7, py::arg("pair_normalization") = false,
        py::arg("threshold") = 60.0, "Quality score of one annotation record.");
  m.def("filter_records",
        [](const std::vector<py::object>& records, double threshold, double lambda_a, double lambda_o,
           bool pair_normalization) {
          std::stringstream in, kept, rejected;
          for (const auto& r : records) in << from_py(r).dump() << '\n';
          FilterOptions opt;
          opt.threshold = threshold;
          opt.weights = weights(lambda_a, lambda_o, pair_normalization);
          const FilterStats st = filter_dataset(in, kept, rejected, opt);
          auto lines = [](std::stringstream& s) {
            py::list out;
            std::string line;
            while (std::getline(s, line)) out.append(to_py(json::parse(line)));
            return out;
          };
          return py::make_tuple(lines(kept), lines(rejected), to_py(st.to_json()));
        },
        py::arg("records"), py::arg("threshold") = 60.0, py::arg("lambda_a") = 0.3, py::arg("lambda_o") = 0.7,
        py::arg("pair_normalization") = false, "Returns (kept, rejected, stats).");

  m.def("generate_scenes",
        [](int count, uint64_t seed, int canvas, int min_instances, int max_instances) {
          SceneSpec spec;
          spec.seed = seed;
          spec.canvas = canvas;
          spec.min_instances = min_instances;
          spec.max_instances = max_instances;
          py::list out;
          for (const auto& s : generate_synthetic_dataset(spec, count))
            out.append(py::make_tuple(image_to_array(s.image), to_py(layout_to_json(s.layout))));
          return out;
        },
        py::arg("count"), py::arg("seed") = 0, py::arg("canvas") = 64, py::arg("min_instances") = 1,
        py::arg("max_instances") = 3, "List of (image, layout) pairs.");
  m.def("render_layout", [](const py::object& layout, int canvas) { return image_to_array(render_layout(layout_arg(layout), canvas)); },
        py::arg("layout"), py::arg("canvas") = 64);
  m.def("detect",
        [](const py::array_t<uint8_t, py::array::c_style | py::array::forcecast>& image) {
          json out = json::array();
          for (const auto& d : oracle_detect(array_to_image(image)))
            out.push_back({{"color", d.color}, {"bbox", {d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2}}, {"pixels", d.pixels}});
          return to_py(out);
        },
        py::arg("image"), "Color-segmentation detections with normalized boxes.");
  m.def("layout_adherence",
        [](const std::vector<py::array_t<uint8_t, py::array::c_style | py::array::forcecast>>& images,
           const std::vector<py::object>& layouts) {
          if (images.size() != layouts.size()) throw std::invalid_argument("images and layouts differ in length");
          std::vector<Image> imgs;
          std::vector<Layout> ls;
          for (size_t i = 0; i < images.size(); ++i) {
            imgs.push_back(array_to_image(images[i]));
            ls.push_back(layout_arg(layouts[i]));
          }
          return to_py(layout_adherence([&](const Layout&, int i) { return imgs[static_cast<size_t>(i)]; }, ls).to_json());
        },
        py::arg("images"), py::arg("layouts"), "Mean IoU and success@0.5 of images against their layouts.");

  m.def("grad_check",
        [](uint64_t seed) {
          GradCheckOptions opt;
          opt.seed = seed;
          std::vector<GradCheckCase> cases;
          {
            py::gil_scoped_release release;
            cases = run_grad_check_suite(opt);
          }
          return to_py(grad_check_to_json(cases));
        },
        py::arg("seed") = 0);
  m.def("param_count",
        [](const std::string& backbone, int rank) {
          ModelSpec spec;
          spec.backbone.kind = backbone;
          spec.lora_cfg.rank = rank;
          const ParamCount pc = param_count(*build_model(spec, 0));
          json layers = json::array();
          for (const auto& l : pc.per_layer)
            layers.push_back({{"layer", l.layer}, {"d_in", l.d_in}, {"d_out", l.d_out}, {"rank", l.rank}, {"params", l.params}});
          return to_py({{"base", pc.base}, {"layout", pc.layout}, {"adapter", pc.adapter}, {"ratio", pc.ratio}, {"layers", layers}});
        },
        py::arg("backbone") = "unet", py::arg("rank") = 8);

  py::class_<Model>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def("sample", &Model::sample, py::arg("layout"), py::arg("tau") = 0.7, py::arg("cfg_scale") = 7.5,
           py::arg("steps") = 50, py::arg("seed") = 0, py::arg("fusion") = "mask", py::arg("stochastic") = false)
      .def("evaluate", &Model::evaluate, py::arg("layouts"), py::arg("tau") = 0.7, py::arg("cfg_scale") = 7.5,
           py::arg("steps") = 50, py::arg("seed") = 0)
      .def_property_readonly("spec", &Model::spec)
      .def_property_readonly("meta", &Model::meta)
      .def_property_readonly("params", &Model::params);
}
