// SPDX-License-Identifier: Apache-2.0
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dcmoe/checkpoint.hpp"
#include "dcmoe/model.hpp"
#include "dcmoe/moe.hpp"
#include "dcmoe/presets.hpp"
#include "dcmoe/telemetry.hpp"

namespace py = pybind11;
using namespace dcmoe;

namespace {

py::dict decision_dict(const RoutingDecision& d) {
    py::dict out;
    out["selected"] = d.selected;
    out["mix_weights"] = d.mix_weights;
    out["n_routed_active"] = d.n_routed_active;
    return out;
}

}  // namespace

PYBIND11_MODULE(_dcmoe, m) {
    m.doc() = "dynamic-capacity MoE core operations";

    m.def(
        "select_top_p",
        [](const std::vector<double>& probs, double p, std::size_t n_routed) {
            return decision_dict(select_top_p(probs, p, n_routed));
        },
        py::arg("probs"), py::arg("p"), py::arg("n_routed"),
        "Smallest prefix of the descending-sorted gate probabilities whose "
        "cumulative mass reaches p; weights renormalized over the selection.");

    m.def(
        "select_top_k",
        [](const std::vector<double>& probs, std::size_t k, std::size_t n_routed) {
            return decision_dict(select_top_k(probs, k, n_routed));
        },
        py::arg("probs"), py::arg("k"), py::arg("n_routed"));

    m.def(
        "plan_dispatch",
        [](const std::vector<double>& loads, std::size_t n_devices) {
            DispatchPlan p = plan_dispatch(loads, n_devices);
            py::dict out;
            out["n_devices"] = p.n_devices;
            out["expert_device"] = p.expert_device;
            out["device_load"] = p.device_load;
            out["imbalance_ratio"] = p.imbalance_ratio;
            out["cross_device_fraction"] = p.cross_device_fraction;
            return out;
        },
        py::arg("expert_loads"), py::arg("n_devices"));

    m.def(
        "make_preset",
        [](const std::string& name) { return make_preset(name).to_json().dump(); },
        py::arg("name"), "Built-in run configuration as a JSON string.");

    m.def(
        "init_checkpoint",
        [](const std::string& config_json, std::uint64_t seed, const std::string& path) {
            ModelConfig cfg = ModelConfig::from_json(nlohmann::json::parse(config_json));
            cfg.validate();
            Rng rng(seed);
            Checkpoint ck;
            ck.config = cfg.to_json();
            ck.params = init_params(cfg, rng);
            ck.metadata = {{"stage", "init"}, {"seed", seed}, {"step_count", 0}};
            save_checkpoint(ck, path);
        },
        py::arg("config_json"), py::arg("seed"), py::arg("path"),
        "Write a freshly initialized checkpoint.");

    m.def(
        "checkpoint_info",
        [](const std::string& path) {
            Checkpoint ck = load_checkpoint(path);
            py::dict out;
            out["config"] = ck.config.dump();
            out["metadata"] = ck.metadata.dump();
            py::dict shapes;
            for (const auto& [name, t] : ck.params) shapes[py::str(name)] = t.shape;
            out["params"] = shapes;
            return out;
        },
        py::arg("path"));

    m.def(
        "forward_logits",
        [](const std::string& ckpt_path, const std::vector<std::size_t>& tokens,
           std::size_t batch, std::size_t seq) {
            Checkpoint ck = load_checkpoint(ckpt_path);
            ModelConfig cfg = ModelConfig::from_json(ck.config);
            Batch b;
            b.batch = batch;
            b.seq = seq;
            b.channels = cfg.n_channels;
            b.tokens = tokens;
            b.domains.assign(batch, 0);
            Tensor logits = forward_logits(cfg, ck.params, b);
            return py::make_tuple(logits.shape, logits.data);
        },
        py::arg("ckpt_path"), py::arg("tokens"), py::arg("batch"), py::arg("seq"),
        "Causal logits for flat [batch][seq][channel] token ids; returns "
        "(shape, flat data).");

    m.def(
        "eval_loss",
        [](const std::string& ckpt_path, const std::vector<std::size_t>& tokens,
           std::size_t batch, std::size_t seq, double aux_weight) {
            Checkpoint ck = load_checkpoint(ckpt_path);
            ModelConfig cfg = ModelConfig::from_json(ck.config);
            Batch b;
            b.batch = batch;
            b.seq = seq;
            b.channels = cfg.n_channels;
            b.tokens = tokens;
            b.domains.assign(batch, 0);
            LossValue v = eval_loss(cfg, ck.params, b, aux_weight);
            py::dict out;
            out["total"] = v.total;
            out["primary"] = v.primary;
            out["aux"] = v.aux;
            return out;
        },
        py::arg("ckpt_path"), py::arg("tokens"), py::arg("batch"), py::arg("seq"),
        py::arg("aux_weight") = 0.0);
}
