#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "relulab/analysis.hpp"
#include "relulab/config.hpp"
#include "relulab/gradcheck.hpp"
#include "relulab/memory.hpp"
#include "relulab/regularizer.hpp"
#include "relulab/train.hpp"

namespace py = pybind11;
using namespace relulab;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor::from(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

ScoreDistribution scores(const Array& weights, const std::string& activation, bool causal) {
    if (weights.ndim() != 3) throw DimensionError("weights must be [heads x n_q x n_k]");
    ScoreDistribution s;
    s.weights = to_tensor(weights);
    s.kind = activation_from_string(activation);
    s.effective_lengths = effective_lengths(s.query_count(), s.key_count(), causal);
    return s;
}

}  // namespace

PYBIND11_MODULE(_relulab, m) {
    m.doc() = "ReLU vs softmax attention laboratory";
    m.attr("__version__") = artifact_version();

    py::register_exception<ContractViolation>(m, "ContractViolation", PyExc_ValueError);
    py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

    m.def(
        "theorem1_report",
        [](const std::vector<std::size_t>& ns, std::size_t trials, std::uint64_t seed) {
            Rng rng(seed);
            py::list rows;
            for (const auto& r : theorem1_report(ns, trials, rng)) {
                rows.append(py::dict(py::arg("n") = r.n, py::arg("trials") = r.trials,
                                     py::arg("empirical_var") = r.empirical_var,
                                     py::arg("predicted_var") = r.predicted_var, py::arg("rel_err") = r.rel_err));
            }
            return rows;
        },
        py::arg("ns"), py::arg("trials") = 100000, py::arg("seed") = 7);

    m.def(
        "variance_probe",
        [](std::size_t n, std::size_t rows, bool scale_factor, double gamma, std::uint64_t seed) {
            AttentionConfig cfg;
            cfg.activation = Activation::ReluScaled;
            cfg.scale_factor = scale_factor;
            cfg.gamma = gamma;
            Rng rng(seed);
            return weighted_value_variance_probe(n, rows, cfg, rng);
        },
        py::arg("n"), py::arg("rows") = 10000, py::arg("scale_factor") = true, py::arg("gamma") = 1.0,
        py::arg("seed") = 0, "Variance of ReLU-weighted sums of independent N(0,1) values over N(0,1) logits.");

    m.def(
        "top_p_mass",
        [](const Array& weights, const std::vector<double>& p_grid, const std::string& activation, bool causal) {
            return top_p_mass(scores(weights, activation, causal), p_grid).mass;
        },
        py::arg("weights"), py::arg("p_grid"), py::arg("activation") = "softmax", py::arg("causal") = false);

    m.def(
        "reg_loss",
        [](const Array& weights, bool causal, double cap_coefficient, double loss_weight) {
            RegConfig cfg;
            cfg.cap_coefficient = cap_coefficient;
            cfg.loss_weight = loss_weight;
            return reg_loss(scores(weights, "relu-scaled", causal), cfg).item();
        },
        py::arg("weights"), py::arg("causal") = false, py::arg("cap_coefficient") = 0.7, py::arg("loss_weight") = 1.0);

    m.def("anisotropy", [](const Array& values) { return anisotropy(to_tensor(values)); }, py::arg("values"));
    m.def(
        "output_variance_ratio",
        [](const Array& out, const Array& residual) { return output_variance_ratio(to_tensor(out), to_tensor(residual)); },
        py::arg("block_output"), py::arg("residual_input"));

    m.def(
        "gradcheck",
        [](bool micro, std::uint64_t seed) {
            py::gil_scoped_release release;
            for (const auto& c : gradient_suite(seed, micro)) {
                if (!c.result.passed) return false;
            }
            return true;
        },
        py::arg("micro") = true, py::arg("seed") = 0);

    m.def("config_hash", [](const std::string& text) { return config_hash(parse_yaml(text)); }, py::arg("config"));

    m.def(
        "train",
        [](const std::string& text) {
            const RunConfig cfg = parse_yaml(text).get<RunConfig>();
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = train(cfg.model, cfg.task, cfg.train);
            }
            py::dict out(py::arg("initial_loss") = r.initial_loss, py::arg("final_loss") = r.final_loss,
                         py::arg("final_accuracy") = r.final_accuracy, py::arg("steps_run") = r.steps_run,
                         py::arg("diverged") = r.divergence.has_value());
            if (r.divergence) out["divergence_reason"] = r.divergence->reason;
            return out;
        },
        py::arg("config"), "Trains from a YAML or JSON run config and returns a summary dict.");
}
