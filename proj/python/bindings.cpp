// Python bindings. Images cross the boundary as float32 arrays shaped (H, W, 3) in [0, 1].

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "m3snet/checkpoint.hpp"
#include "m3snet/data.hpp"
#include "m3snet/errors.hpp"
#include "m3snet/metrics.hpp"
#include "m3snet/network.hpp"
#include "m3snet/trainer.hpp"

namespace py = pybind11;
using namespace m3snet;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Image to_image(const Array& array) {
  if (array.ndim() != 3 || array.shape(2) != 3) {
    throw py::value_error("expected an image array of shape (H, W, 3)");
  }
  const auto h = static_cast<std::int64_t>(array.shape(0)), w = static_cast<std::int64_t>(array.shape(1));
  Image image(h, w);
  auto v = array.unchecked<3>();
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) image.at(c, y, x) = v(y, x, c);
  return image;
}

Array to_array(const Image& image) {
  Array array({image.height, image.width, std::int64_t{3}});
  auto v = array.mutable_unchecked<3>();
  for (int c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < image.height; ++y)
      for (std::int64_t x = 0; x < image.width; ++x) v(y, x, c) = image.at(c, y, x);
  return array;
}

class Model {
 public:
  explicit Model(const ModelConfig& config, std::uint64_t seed) : net_(config, seed) {}
  explicit Model(Network<float> net) : net_(std::move(net)) {}

  static Model load(const std::filesystem::path& path) { return Model(network_from_checkpoint(load_checkpoint(path))); }

  Array restore(const Array& image, bool tlc) const {
    Image in = to_image(image);
    Image out;
    {
      py::gil_scoped_release release;
      out = restore_image(net_, in, tlc);
    }
    return to_array(out);
  }

  const ModelConfig& config() const { return net_.config(); }
  std::int64_t parameter_count() const { return net_.parameters().count(); }

 private:
  Network<float> net_;
};

py::dict macs_dict(const MacBreakdown& m) {
  py::dict d;
  d["conv"] = m.conv;
  d["attention"] = m.attention;
  d["total"] = m.total();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Mountain-shaped multi-scale restoration network";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("width", &ModelConfig::width)
      .def_readwrite("enc_blocks", &ModelConfig::enc_blocks)
      .def_readwrite("dec_blocks", &ModelConfig::dec_blocks)
      .def_readwrite("ffm_blocks", &ModelConfig::ffm_blocks)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("tlc_window", &ModelConfig::tlc_window)
      .def_property(
          "ablation", [](const ModelConfig& c) { return to_string(c.ablation); },
          [](ModelConfig& c, const std::string& s) { c.ablation = parse_ablation(s); })
      .def_property_readonly("spatial_multiple", &ModelConfig::spatial_multiple)
      .def("validate", &ModelConfig::validate)
      .def("to_dict",
           [](const ModelConfig& c) {
             py::dict d;
             for (const auto& [k, v] : c.to_key_values()) d[py::str(k)] = v;
             return d;
           })
      .def("__eq__", [](const ModelConfig& a, const ModelConfig& b) { return a == b; })
      .def("__repr__", [](const ModelConfig& c) {
        std::string s = "ModelConfig(";
        for (const auto& [k, v] : c.to_key_values()) s += k + "=" + v + ", ";
        return s.substr(0, s.size() - 2) + ")";
      });

  m.def("count_params", &count_params, py::arg("config"));
  m.def(
      "estimate_macs",
      [](const ModelConfig& c, std::int64_t h, std::int64_t w) { return macs_dict(estimate_macs(c, h, w)); },
      py::arg("config"), py::arg("height") = 256, py::arg("width") = 256);

  py::class_<Model>(m, "Model")
      .def(py::init<const ModelConfig&, std::uint64_t>(), py::arg("config") = ModelConfig{}, py::arg("seed") = 0)
      .def_static("load", &Model::load, py::arg("path"))
      .def("restore", &Model::restore, py::arg("image"), py::arg("tlc") = false)
      .def_property_readonly("config", &Model::config)
      .def_property_readonly("parameter_count", &Model::parameter_count);

  m.def(
      "psnr",
      [](const Array& pred, const Array& target, const std::string& mode) {
        return psnr_metric(to_image(pred), to_image(target), parse_channel_mode(mode));
      },
      py::arg("pred"), py::arg("target"), py::arg("mode") = "rgb");
  m.def(
      "ssim",
      [](const Array& pred, const Array& target, const std::string& mode) {
        return ssim_metric(to_image(pred), to_image(target), parse_channel_mode(mode));
      },
      py::arg("pred"), py::arg("target"), py::arg("mode") = "rgb");
  m.def(
      "error_reduction",
      [](double best, double other, const std::string& kind) -> py::object {
        if (kind != "psnr" && kind != "ssim") throw py::value_error("kind must be 'psnr' or 'ssim'");
        const auto r = error_reduction(best, other, kind == "psnr" ? ReductionKind::kPsnr : ReductionKind::kSsim);
        return r.defined ? py::object(py::float_(r.percent)) : py::none();
      },
      py::arg("best"), py::arg("other"), py::arg("kind") = "psnr");

  m.def(
      "synthesize_pairs",
      [](int count, std::int64_t size, std::uint64_t seed, const std::map<std::string, std::string>& spec) {
        DegradationSpec s;
        for (const auto& [k, v] : spec)
          if (!s.apply(k, v)) throw py::value_error("unknown degradation key '" + k + "'");
        s.validate();
        py::list out;
        for (const auto& p : synthesize_pairs(count, size, s, seed))
          out.append(py::make_tuple(to_array(p.degraded), to_array(p.clean)));
        return out;
      },
      py::arg("count"), py::arg("size"), py::arg("seed") = 0,
      py::arg("spec") = std::map<std::string, std::string>{});
}
