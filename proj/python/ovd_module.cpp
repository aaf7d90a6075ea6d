// SPDX-License-Identifier: Apache-2.0
// Python binding. Structured results cross the boundary as JSON text; the
// package wrapper decodes them.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ovd/assistant.hpp"
#include "ovd/checkpoint.hpp"
#include "ovd/config.hpp"
#include "ovd/dataset.hpp"
#include "ovd/dialogue.hpp"
#include "ovd/error.hpp"
#include "ovd/flops.hpp"
#include "ovd/metrics.hpp"
#include "ovd/trainer.hpp"

namespace py = pybind11;
using namespace ovd;

namespace {

RunConfig make_config(const std::vector<std::string>& overrides) {
    RunConfig c;
    apply_overrides(c, overrides);
    c.validate();
    return c;
}

std::vector<StreamSample> samples_from_jsonl(const std::string& text) {
    std::vector<StreamSample> out;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(sample_from_json(nlohmann::json::parse(line)));
    return out;
}

}  // namespace

PYBIND11_MODULE(_ovd, m) {
    m.doc() = "online video dialogue toolkit";

    static PyObject* error = PyErr_NewException("ovd._ovd.OvdError", PyExc_RuntimeError, nullptr);
    m.attr("OvdError") = py::reinterpret_borrow<py::object>(error);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const Error& e) {
            py::object inst = py::reinterpret_borrow<py::object>(error)(e.what());
            std::string kind = to_string(e.kind());
            inst.attr("kind") = kind.substr(0, kind.find(' '));
            PyErr_SetObject(error, inst.ptr());
        }
    });

    py::class_<RunConfig>(m, "Config")
        .def(py::init(&make_config), py::arg("overrides") = std::vector<std::string>{})
        .def_static("parse", [](const std::string& text) { return RunConfig::parse(text); })
        .def("get", &RunConfig::get)
        .def("set", [](RunConfig& c, const std::string& k, const std::string& v) {
            c.set(k, v);
            c.validate();
        })
        .def_static("keys", &RunConfig::keys)
        .def("dump", &RunConfig::dump)
        .def("hash", &RunConfig::hash_hex);

    m.def(
        "generate_dataset_jsonl",
        [](const RunConfig& c, const std::string& split) {
            const bool held = split == "heldout";
            require(held || split == "train", ErrorKind::config, "split is train or heldout");
            DataConfig d = c.data;
            if (held) d.augment = "none";
            return dataset_to_jsonl(generate_dataset(held ? d.heldout_seed : d.seed,
                                                     held ? d.heldout_episodes : d.episodes, d));
        },
        py::arg("config"), py::arg("split") = "train");

    py::class_<Assistant>(m, "Assistant")
        .def(py::init<const RunConfig&>())
        .def("load", [](Assistant& a, const std::string& path) { return load_parameters(a, path); })
        .def("checksum", [](const Assistant& a) { return hex64(parameter_checksum(a.parameters())); })
        .def("n_parameters",
             [](const Assistant& a) {
                 std::size_t n = 0;
                 for (const auto& p : a.parameters()) n += p.tensor.numel();
                 return n;
             })
        .def("tokens_per_frame", &Assistant::tokens_per_frame)
        .def(
            "simulate_jsonl",
            [](const Assistant& a, const std::string& sample_json, bool slow_path) {
                EngineOptions opt = engine_options(a.config());
                opt.slow_path = slow_path;
                const StreamSample s = sample_from_json(nlohmann::json::parse(sample_json));
                py::gil_scoped_release release;
                return episode_log_to_jsonl(run_episode(a, s, opt).log);
            },
            py::arg("sample_json"), py::arg("slow_path") = true)
        .def(
            "evaluate_json",
            [](const Assistant& a, const std::string& jsonl, bool online) {
                const auto samples = samples_from_jsonl(jsonl);
                py::gil_scoped_release release;
                return build_report(a, samples, EvalOptions{online, 1}).to_json().dump();
            },
            py::arg("jsonl"), py::arg("online") = true)
        .def(
            "train",
            [](Assistant& a, const std::string& jsonl, std::size_t steps) {
                std::vector<EncodedEpisode> eps;
                for (const auto& s : samples_from_jsonl(jsonl)) eps.push_back(a.encode(s));
                Trainer t(a, std::move(eps));
                std::vector<double> losses;
                py::gil_scoped_release release;
                for (std::size_t i = 0; i < steps; ++i) losses.push_back(t.step().loss);
                return losses;
            },
            py::arg("jsonl"), py::arg("steps"));

    m.def(
        "flops_json",
        [](const RunConfig& c, std::size_t frames, std::size_t responses, std::size_t response_len,
           bool with_template) {
            const SeqProfile prof =
                episode_profile(frames, kFrameTokens, responses, response_len, with_template);
            return flops_estimate(c.model, c.dropping.beta, c.dropping.policy, prof).to_json().dump();
        },
        py::arg("config"), py::arg("frames") = 20, py::arg("responses") = 3,
        py::arg("response_len") = 3, py::arg("with_template") = true);
}
