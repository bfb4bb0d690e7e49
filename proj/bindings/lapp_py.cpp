#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "lapp/flops_model.hpp"
#include "lapp/masking.hpp"
#include "lapp/network.hpp"
#include "lapp/surgery.hpp"
#include "lapp/version.hpp"

namespace py = pybind11;
using namespace lapp;

namespace {

Tensor<double> tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  std::vector<int64_t> shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = a.shape(i);
  Tensor<double> t(shape);
  std::copy_n(a.data(), static_cast<size_t>(t.numel()), t.data());
  return t;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Layer adaptive progressive pruning: FLOPs accounting, masking and "
            "architecture operations";
  m.attr("__version__") = kVersion;

  py::enum_<LayerKind>(m, "LayerKind")
      .value("conv", LayerKind::conv)
      .value("depthwise_conv", LayerKind::depthwise_conv)
      .value("pointwise_conv", LayerKind::pointwise_conv)
      .value("linear", LayerKind::linear);

  py::enum_<BypassKind>(m, "BypassKind")
      .value("none", BypassKind::none)
      .value("v1", BypassKind::v1)
      .value("v2", BypassKind::v2);

  py::class_<LayerSpec>(m, "LayerSpec")
      .def(py::init<>())
      .def_readwrite("name", &LayerSpec::name)
      .def_readwrite("kind", &LayerSpec::kind)
      .def_readwrite("c_in", &LayerSpec::c_in)
      .def_readwrite("c_out", &LayerSpec::c_out)
      .def_readwrite("k", &LayerSpec::k)
      .def_readwrite("stride", &LayerSpec::stride)
      .def_readwrite("h_out", &LayerSpec::h_out)
      .def_readwrite("w_out", &LayerSpec::w_out)
      .def_readwrite("prunable", &LayerSpec::prunable)
      .def_readwrite("norm", &LayerSpec::norm);

  py::class_<BypassSpec>(m, "BypassSpec")
      .def(py::init<>())
      .def_readwrite("kind", &BypassSpec::kind)
      .def_readwrite("c_in", &BypassSpec::c_in)
      .def_readwrite("c_out", &BypassSpec::c_out)
      .def_readwrite("d", &BypassSpec::d)
      .def_readwrite("k", &BypassSpec::k)
      .def_readwrite("h_out", &BypassSpec::h_out)
      .def_readwrite("w_out", &BypassSpec::w_out)
      .def_readwrite("stride", &BypassSpec::stride)
      .def("flops", &BypassSpec::flops)
      .def("params", &BypassSpec::params);

  py::class_<ArchSpec>(m, "ArchSpec")
      .def_readonly("name", &ArchSpec::name)
      .def_readonly("layers", &ArchSpec::layers)
      .def_readonly("class_count", &ArchSpec::class_count)
      .def("prunable_names", &ArchSpec::prunable_names);

  m.def("conv_flops", &conv_flops, py::arg("layer"), py::arg("active_out"),
        py::arg("active_in"));
  m.def("bypass_flops", &bypass_flops, py::arg("c_in"), py::arg("c_out"), py::arg("d"),
        py::arg("k"), py::arg("h_out"), py::arg("w_out"), py::arg("stride"));
  m.def("network_total_flops", &network_total_flops, py::arg("arch"));
  m.def("masked_network_flops", &masked_network_flops, py::arg("arch"),
        py::arg("kept_counts"), py::arg("bypasses"));
  m.def("per_filter_flops", &per_filter_flops, py::arg("layer"));
  m.def("params_count", &params_count, py::arg("arch"), py::arg("kept_counts"),
        py::arg("bypasses"));
  m.def("compression_rate", &compression_rate, py::arg("t_kept"), py::arg("t_total"));
  m.def("flops_regularizer", &flops_regularizer, py::arg("c_hat"), py::arg("c_target"));
  m.def("flops_regularizer_grad", &flops_regularizer_grad, py::arg("c_hat"),
        py::arg("c_target"));

  m.def("arch_document_write", &arch_document_write, py::arg("arch"));
  m.def("arch_document_read", &arch_document_read, py::arg("text"));
  m.def("build_arch_spec", &build_arch_spec, py::arg("name"));
  m.def("bypass_specs_for", &bypass_specs_for, py::arg("spec"), py::arg("c_target"),
        py::arg("bypass_kind"));
  m.def("uniform_kept_counts", &uniform_kept_counts, py::arg("spec"), py::arg("p"));
  m.def("full_kept_counts", &full_kept_counts, py::arg("spec"));
  m.def("select_bypass_width", &select_bypass_width, py::arg("c_out"), py::arg("c_target"));
  m.def("kept_indices", &kept_indices, py::arg("hard_mask"));

  m.def(
      "importance_l1",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& w) {
        return importance_l1(tensor_from_array(w));
      },
      py::arg("sparse_weights"), "Per-filter l1 norms of a [c_out,c_in,k,k] array");
  m.def(
      "soft_mask",
      [](const std::vector<double>& imp, double thr) { return soft_mask(imp, thr); },
      py::arg("importance"), py::arg("threshold"));
  m.def(
      "binarize_ste",
      [](const std::vector<double>& soft) { return binarize_ste(soft); },
      py::arg("soft_mask"));
}
