#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ssmlora/config.hpp"
#include "ssmlora/tasks.hpp"
#include "ssmlora/train.hpp"

namespace py = pybind11;
using namespace ssmlora;

namespace {

InsertionPlan plan_by_name(const std::string& kind, std::size_t layers) {
    if (kind == "alternating") return plan_alternating(layers);
    if (kind == "skip-one") return plan_skip_one(layers);
    if (kind == "dense-lora") return baseline_plan(layers);
    if (kind == "none") return {};
    throw ConfigError("unknown plan kind: " + kind);
}

// Python-facing handle; owns the encoder and routes list-based IO.
struct Model {
    FrozenEncoder enc;

    Model(const EncoderConfig& cfg, std::uint64_t seed) : enc(build_encoder(cfg, seed)) {}

    void attach(const std::string& plan_kind, const AdapterConfig& cfg, std::uint64_t seed) {
        attach_adapters(enc, plan_by_name(plan_kind, enc.cfg.layers), cfg, seed);
    }

    std::vector<std::vector<double>> forward(const std::vector<int>& tokens, std::size_t batch,
                                             std::size_t seq) const {
        Tensor logits = encoder_forward(enc, tokens, batch, seq);
        std::vector<std::vector<double>> out(batch);
        for (std::size_t b = 0; b < batch; ++b) {
            out[b].resize(enc.cfg.classes);
            for (std::size_t c = 0; c < enc.cfg.classes; ++c)
                out[b][c] = logits[b * enc.cfg.classes + c];
        }
        return out;
    }

    Metrics fit(const TaskSpec& task, const TrainOptions& opts) { return train(enc, task, opts); }

    EvalResult evaluate_task(const TaskSpec& task, std::size_t batch_size) const {
        return evaluate(enc, gen_task_eval(task), batch_size);
    }

    GradcheckReport check_gradients(const TaskSpec& task, std::size_t coords, double delta,
                                    std::uint64_t seed, std::size_t batch_size) {
        return gradcheck(enc, gen_task(task), coords, delta, seed, batch_size);
    }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "low-rank adapters chained layer to layer through a state recurrence";

    py::register_exception<Error>(m, "SsmloraError");

    py::class_<EncoderConfig>(m, "EncoderConfig")
        .def(py::init<>())
        .def_readwrite("layers", &EncoderConfig::layers)
        .def_readwrite("width", &EncoderConfig::width)
        .def_readwrite("heads", &EncoderConfig::heads)
        .def_readwrite("ffn_width", &EncoderConfig::ffn_width)
        .def_readwrite("vocab", &EncoderConfig::vocab)
        .def_readwrite("max_seq", &EncoderConfig::max_seq)
        .def_readwrite("classes", &EncoderConfig::classes)
        .def_readwrite("fused_qkv", &EncoderConfig::fused_qkv);

    py::class_<AdapterConfig>(m, "AdapterConfig")
        .def(py::init<>())
        .def_readwrite("rank", &AdapterConfig::rank)
        .def_readwrite("alpha", &AdapterConfig::alpha)
        .def_readwrite("epsilon", &AdapterConfig::epsilon)
        .def_readwrite("init_sigma", &AdapterConfig::init_sigma)
        .def_readwrite("dropout", &AdapterConfig::dropout);

    py::class_<TaskSpec>(m, "TaskSpec")
        .def(py::init<>())
        .def_readwrite("kind", &TaskSpec::kind)
        .def_readwrite("seq_len", &TaskSpec::seq_len)
        .def_readwrite("n_train", &TaskSpec::n_train)
        .def_readwrite("n_eval", &TaskSpec::n_eval)
        .def_readwrite("vocab", &TaskSpec::vocab)
        .def_readwrite("seed", &TaskSpec::seed);

    py::class_<TrainOptions>(m, "TrainOptions")
        .def(py::init<>())
        .def_readwrite("lr", &TrainOptions::lr)
        .def_readwrite("batch_size", &TrainOptions::batch_size)
        .def_readwrite("max_epochs", &TrainOptions::max_epochs)
        .def_readwrite("patience", &TrainOptions::patience)
        .def_readwrite("seed", &TrainOptions::seed)
        .def_readwrite("eval_subset", &TrainOptions::eval_subset)
        .def_readwrite("stop_train_acc", &TrainOptions::stop_train_acc);

    py::class_<EpochRecord>(m, "EpochRecord")
        .def_readonly("epoch", &EpochRecord::epoch)
        .def_readonly("train_loss", &EpochRecord::train_loss)
        .def_readonly("train_acc", &EpochRecord::train_acc)
        .def_readonly("eval_acc", &EpochRecord::eval_acc);

    py::class_<Metrics>(m, "Metrics")
        .def_readonly("epochs", &Metrics::epochs)
        .def_readonly("best_eval_acc", &Metrics::best_eval_acc)
        .def_readonly("best_epoch", &Metrics::best_epoch)
        .def_readonly("final_train_acc", &Metrics::final_train_acc)
        .def_readonly("trainable_params", &Metrics::trainable_params)
        .def_readonly("early_stopped", &Metrics::early_stopped);

    py::class_<LengthBin>(m, "LengthBin")
        .def_readonly("seq_len", &LengthBin::seq_len)
        .def_readonly("count", &LengthBin::count)
        .def_readonly("accuracy", &LengthBin::accuracy);

    py::class_<EvalResult>(m, "EvalResult")
        .def_readonly("accuracy", &EvalResult::accuracy)
        .def_readonly("count", &EvalResult::count)
        .def_readonly("by_length", &EvalResult::by_length);

    py::class_<CoordCheck>(m, "CoordCheck")
        .def_readonly("name", &CoordCheck::name)
        .def_readonly("coord", &CoordCheck::coord)
        .def_readonly("analytic", &CoordCheck::analytic)
        .def_readonly("numeric", &CoordCheck::numeric)
        .def_readonly("rel_err", &CoordCheck::rel_err);

    py::class_<GradcheckReport>(m, "GradcheckReport")
        .def_readonly("max_rel_err", &GradcheckReport::max_rel_err)
        .def_readonly("coords_checked", &GradcheckReport::coords_checked)
        .def_readonly("worst", &GradcheckReport::worst)
        .def_readonly("per_matrix", &GradcheckReport::per_matrix);

    py::class_<Model>(m, "Model")
        .def(py::init<const EncoderConfig&, std::uint64_t>(), py::arg("config"),
             py::arg("seed") = 7)
        .def("attach", &Model::attach, py::arg("plan"), py::arg("adapter"), py::arg("seed") = 8)
        .def("forward", &Model::forward, py::arg("tokens"), py::arg("batch"), py::arg("seq"))
        .def("train", &Model::fit, py::arg("task"), py::arg("options"))
        .def("evaluate", &Model::evaluate_task, py::arg("task"), py::arg("batch_size") = 64)
        .def("gradcheck", &Model::check_gradients, py::arg("task"), py::arg("coords") = 64,
             py::arg("delta") = 1e-5, py::arg("seed") = 1, py::arg("batch_size") = 4)
        .def("randomize_adapters",
             [](Model& self, double sigma, std::uint64_t seed) {
                 randomize_adapters(self.enc, sigma, seed);
             },
             py::arg("sigma"), py::arg("seed"))
        .def_property_readonly("adapter_params",
                               [](const Model& self) { return adapter_param_count(self.enc); })
        .def_property_readonly("trainable_params",
                               [](const Model& self) { return trainable_param_count(self.enc); })
        .def_property_readonly("base_hash",
                               [](const Model& self) { return base_hash(self.enc); });

    m.def(
        "count_params",
        [](const std::string& plan, std::size_t layers, std::size_t width, std::size_t rank,
           const std::string& method) {
            ModelDims dims{layers, width, 0, 0};
            return count_params(plan_by_name(plan, layers), dims, rank,
                                method_from_name(method));
        },
        py::arg("plan"), py::arg("layers"), py::arg("width"), py::arg("rank"),
        py::arg("method"), "Trainable adapter parameters of a plan at one rank.");

    m.def(
        "normalize_state",
        [](const std::vector<double>& h, double epsilon) {
            Tensor t = Tensor::from_data({1, 1, h.size()}, h);
            Tensor out = normalize_state(t, epsilon);
            return std::vector<double>(out.data(), out.data() + out.numel());
        },
        py::arg("h"), py::arg("epsilon") = 1e-5,
        "Range-normalize one state vector into [0, 1).");
}
