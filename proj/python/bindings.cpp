#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "mfi/checkpoint.hpp"
#include "mfi/cli.hpp"
#include "mfi/data.hpp"
#include "mfi/meanflow.hpp"
#include "mfi/pipeline.hpp"
#include "mfi/resnet.hpp"

namespace py = pybind11;
using namespace mfi;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
    FloatArray a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
    std::copy(t.ptr(), t.ptr() + t.numel(), a.mutable_data());
    return a;
}

// Column vector [N, 1] from a 1-d array.
Tensor column(const FloatArray& a) {
    Tensor t = to_tensor(a);
    return t.reshape({t.numel(), 1});
}

py::dict breakdown(const pipeline::ParamBreakdown& b) {
    py::dict d;
    d["stem"] = b.stem;
    d["stages"] = std::vector<std::int64_t>(b.stage.begin(), b.stage.end());
    d["head"] = b.head;
    d["total"] = b.total();
    return d;
}

resnet::ResNetConfig backbone(const std::string& name, int classes, double width) {
    return resnet::ResNetConfig::by_name(name, classes, width);
}

// Velocity net with its own generator, for experimenting from Python.
struct PyVelocityNet {
    PyVelocityNet(std::int64_t channels, std::int64_t hidden, std::int64_t embed_dim, std::uint64_t seed)
        : rng(seed), net("u", {channels, hidden, embed_dim}, rng) {}

    FloatArray forward(const FloatArray& z, const FloatArray& r, const FloatArray& t) {
        return to_array(net.forward(nn::PlainMode{false}, to_tensor(z), column(r), column(t)));
    }

    SeededRng rng;
    meanflow::VelocityNet net;
};

}  // namespace

PYBIND11_MODULE(_mfi, m) {
    m.doc() = "MeanFlow incubation library";

    py::register_exception<Error>(m, "Error");

    m.def(
        "count_params",
        [](const std::string& name, int classes, double width, std::int64_t hidden, std::int64_t embed_dim) {
            const auto cfg = backbone(name, classes, width);
            const std::int64_t h = hidden > 0 ? hidden : pipeline::calibrate_hidden(cfg, embed_dim, pipeline::meta_budget(cfg));
            const auto t = resnet::count_params(cfg);
            py::dict d;
            d["hidden"] = h;
            d["teacher"] = breakdown({t.stem, t.stage, t.head});
            d["meta"] = breakdown(pipeline::meta_param_counts(cfg, h, embed_dim));
            d["hybrid"] = breakdown(pipeline::hybrid_param_counts(cfg, h, embed_dim));
            return d;
        },
        py::arg("backbone") = "resnet34", py::arg("classes") = 10, py::arg("width") = 1.0, py::arg("hidden") = 0,
        py::arg("embed_dim") = 64, "Per-stage parameter counts of teacher, meta and hybrid models.");

    m.def(
        "meta_budget",
        [](const std::string& name, int classes, double width) { return pipeline::meta_budget(backbone(name, classes, width)); },
        py::arg("backbone"), py::arg("classes") = 10, py::arg("width") = 1.0);

    m.def(
        "calibrate_hidden",
        [](const std::string& name, int classes, double width, std::int64_t embed_dim, double target) {
            return pipeline::calibrate_hidden(backbone(name, classes, width), embed_dim, target);
        },
        py::arg("backbone"), py::arg("classes"), py::arg("width"), py::arg("embed_dim"), py::arg("target"));

    m.def(
        "sample_times",
        [](std::int64_t n, std::uint64_t seed, double mean, double stddev, double equal_fraction) {
            SeededRng rng(seed);
            const auto tb = meanflow::TimeSampler{mean, stddev, equal_fraction}.sample(rng, n);
            return py::make_tuple(to_array(tb.r.reshape({n})), to_array(tb.t.reshape({n})));
        },
        py::arg("n"), py::arg("seed") = 0, py::arg("mean") = -0.4, py::arg("stddev") = 1.0,
        py::arg("equal_fraction") = 0.75, "Returns (r, t) with r <= t.");

    py::class_<PyVelocityNet>(m, "VelocityNet")
        .def(py::init<std::int64_t, std::int64_t, std::int64_t, std::uint64_t>(), py::arg("channels"),
             py::arg("hidden") = 64, py::arg("embed_dim") = 64, py::arg("seed") = 0)
        .def("forward", &PyVelocityNet::forward, py::arg("z"), py::arg("r"), py::arg("t"))
        .def_property(
            "output_bias", [](PyVelocityNet& p) { return to_array(p.net.fc3.bias.value); },
            [](PyVelocityNet& p, const FloatArray& b) { p.net.fc3.bias.value = to_tensor(b); })
        .def_property(
            "output_weight", [](PyVelocityNet& p) { return to_array(p.net.fc3.weight.value); },
            [](PyVelocityNet& p, const FloatArray& w) { p.net.fc3.weight.value = to_tensor(w); });

    m.def(
        "target_velocity",
        [](PyVelocityNet& p, const FloatArray& z, const FloatArray& r, const FloatArray& t, const FloatArray& v,
           const std::string& mode) {
            const meanflow::TimeBatch tb{column(r), column(t)};
            return to_array(meanflow::target_velocity(p.net, to_tensor(z), tb, to_tensor(v), meanflow::parse_jvp_mode(mode)));
        },
        py::arg("net"), py::arg("z"), py::arg("r"), py::arg("t"), py::arg("v"), py::arg("mode") = "full");

    m.def(
        "parse_cifar",
        [](py::bytes raw, const std::string& kind) {
            const std::string s = raw;
            const std::span bytes(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
            const auto ds = data::parse_cifar_records(bytes, data::parse_dataset_kind(kind));
            return py::make_tuple(to_array(ds.images), ds.labels);
        },
        py::arg("data"), py::arg("kind") = "cifar10", "Returns (images [N, 3, 32, 32] in [0, 1], labels).");

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_static("load", py::overload_cast<const std::filesystem::path&>(&Checkpoint::load), py::arg("path"))
        .def_readonly("kind", &Checkpoint::kind)
        .def_readonly("hyper", &Checkpoint::hyper)
        .def_readonly("log", &Checkpoint::log)
        .def("names", [](const Checkpoint& c) {
            std::vector<std::string> out;
            for (const auto& [name, t] : c.tensors) out.push_back(name);
            return out;
        })
        .def("tensor", [](const Checkpoint& c, const std::string& name) { return to_array(c.tensor(name)); });

    m.def(
        "cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = cli_dispatch(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs one mfi subcommand; returns (exit code, stdout, stderr).");
}
