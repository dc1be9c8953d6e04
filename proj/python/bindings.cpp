#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "amalgam/cli.hpp"
#include "amalgam/experiments.hpp"
#include "amalgam/gradcheck.hpp"
#include "amalgam/selector.hpp"
#include "amalgam/zoo.hpp"

namespace py = pybind11;
using namespace amalgam;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    Array out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

FAWeights fa_of(const Array& w) { return {to_tensor(w), BridgeSide::student, 0}; }

py::dict dataset_dict(const Dataset& d) {
    py::dict out;
    out["images"] = to_array(d.images);
    py::dict labels;
    for (const auto& [task, l] : d.labels) labels[py::str(task)] = py::array_t<int>(static_cast<py::ssize_t>(l.size()), l.data());
    out["labels"] = labels;
    out["ids"] = d.ids;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Adaptive knowledge amalgamation (float64 CPU core)";

    static py::handle error_type = py::exception<Error>(m, "AmalgamError", PyExc_RuntimeError).release();
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            PyErr_SetString(error_type.ptr(), (std::string(to_string(e.kind())) + ": " + e.what()).c_str());
        }
    });

    py::class_<HeadSpec>(m, "HeadSpec")
        .def(py::init([](std::string task, std::size_t classes) { return HeadSpec{std::move(task), classes}; }),
             py::arg("task_id"), py::arg("num_classes") = 2)
        .def_readwrite("task_id", &HeadSpec::task_id)
        .def_readwrite("num_classes", &HeadSpec::num_classes);

    py::class_<BlockNetSpec>(m, "BlockNetSpec")
        .def(py::init<>())
        .def_readwrite("input_shape", &BlockNetSpec::input_shape)
        .def_readwrite("stem_channels", &BlockNetSpec::stem_channels)
        .def_readwrite("block_channels", &BlockNetSpec::block_channels)
        .def_readwrite("block_strides", &BlockNetSpec::block_strides)
        .def_readwrite("heads", &BlockNetSpec::heads)
        .def("validate", &BlockNetSpec::validate)
        .def("widened", &BlockNetSpec::widened);

    py::class_<ResourceCount>(m, "ResourceCount")
        .def_readonly("params", &ResourceCount::params)
        .def_readonly("flops_per_image", &ResourceCount::flops_per_image);

    py::class_<BlockNet>(m, "BlockNet")
        .def_static("build", &BlockNet::build, py::arg("spec"), py::arg("seed"))
        .def_property_readonly("spec", &BlockNet::spec)
        .def_property_readonly("tasks", &BlockNet::task_set)
        .def("forward",
             [](const BlockNet& net, const Array& images) {
                 NoGradGuard guard;
                 const auto f = net.forward(to_tensor(images));
                 py::dict logits;
                 for (const auto& [task, t] : f.logits) logits[py::str(task)] = to_array(t);
                 py::list maps;
                 for (const auto& t : f.maps) maps.append(to_array(t));
                 return py::make_tuple(logits, maps);
             },
             "Returns (logits by task, per-block feature maps).")
        .def("parameters",
             [](const BlockNet& net) {
                 py::dict out;
                 for (const auto& p : net.parameters()) out[py::str(p.name)] = to_array(p.tensor);
                 return out;
             })
        .def("count_resources", &BlockNet::count_resources)
        .def("bitwise_equal", &BlockNet::bitwise_equal);

    m.def("fa_forward", [](const Array& w, const Array& f) { return to_array(fa_forward(fa_of(w), to_tensor(f))); },
          py::arg("weight"), py::arg("features"));
    m.def("transfer_loss", [](const Array& s, const Array& t) { return transfer_loss(to_tensor(s), to_tensor(t)).item(); });
    m.def("weight_regularization", [](const Array& w) { return weight_regularization(fa_of(w)).item(); });
    m.def("soft_target_loss",
          [](const Array& s, const Array& t, double lambda) {
              return soft_target_loss(to_tensor(s), to_tensor(t), Tensor::scalar(lambda)).item();
          },
          py::arg("student_logits"), py::arg("teacher_logits"), py::arg("lambda_") = 1.0);
    m.def("softmax", [](const Array& x) { return to_array(softmax(to_tensor(x))); });
    m.def("entropy_impurity", [](std::vector<double> p, double clamp) { return entropy_impurity(p, clamp); },
          py::arg("probs"), py::arg("clamp") = kDefaultEntropyClamp);
    m.def("select_teacher",
          [](const std::vector<std::vector<double>>& probs) {
              std::vector<TeacherPrediction> preds;
              for (std::size_t i = 0; i < probs.size(); ++i) preds.push_back({i, "", probs[i]});
              return select_teacher(preds);
          },
          "Index of the least ambiguous teacher for one sample.");
    m.def("select_batch",
          [](const std::vector<Array>& probs) {
              std::vector<TeacherBatchPrediction> preds;
              for (std::size_t i = 0; i < probs.size(); ++i) preds.push_back({i, "", to_tensor(probs[i])});
              return select_batch(preds);
          });
    m.def("gradient_suite",
          [](std::size_t seeds) {
              py::list out;
              for (const auto& c : gradient_suite(seeds)) out.append(py::make_tuple(c.op, c.seed, c.relative_error));
              return out;
          },
          py::arg("seeds") = 5);

    m.def("generate",
          [](std::size_t n, std::uint64_t seed, std::size_t image_size, double noise) {
              SceneDistribution dist;
              dist.image_size = image_size;
              dist.noise = noise;
              return dataset_dict(generate(dist, n, seed));
          },
          py::arg("n"), py::arg("seed"), py::arg("image_size") = 16, py::arg("noise") = SceneDistribution{}.noise);
    m.def("default_tasks", &default_tasks);

    m.def("save_net", &save_net);
    m.def("load_net", &load_net);
    m.def("load_dataset", [](const std::filesystem::path& p) { return dataset_dict(load_dataset(p)); });

    m.def("run_cli",
          [](std::vector<std::string> args) {
              args.insert(args.begin(), "amalgam");
              std::vector<const char*> argv;
              for (const auto& a : args) argv.push_back(a.c_str());
              std::ostringstream out, err;
              int code;
              {
                  py::gil_scoped_release release;
                  code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
              }
              return py::make_tuple(code, out.str(), err.str());
          },
          "Runs the command-line driver in-process; returns (exit_code, stdout, stderr).");
}
