#include "ssmlora/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>

#include "ssmlora/rng.hpp"

namespace ssmlora {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5bd1e995u;
constexpr std::uint64_t kDropoutStream = 0xc2b2ae35u;
constexpr std::uint64_t kCoordStream = 0x27d4eb2fu;

double now_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::size_t uniform_length(const Dataset& data, const char* who) {
    if (data.examples.empty()) throw InputError(std::string(who) + ": empty dataset");
    std::size_t len = data.examples[0].tokens.size();
    for (const Example& ex : data.examples)
        if (ex.tokens.size() != len)
            throw InputError(std::string(who) + ": examples must share one length");
    return len;
}

void gather_batch(const Dataset& data, const std::vector<std::size_t>& order,
                  std::size_t begin, std::size_t end, std::size_t seq,
                  std::vector<int>& tokens, std::vector<int>& labels) {
    tokens.clear();
    labels.clear();
    for (std::size_t i = begin; i < end; ++i) {
        const Example& ex = data.examples[order[i]];
        tokens.insert(tokens.end(), ex.tokens.begin(), ex.tokens.end());
        labels.push_back(ex.label);
    }
    (void)seq;
}

std::size_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t n = labels.size();
    const std::size_t classes = logits.dim(1);
    const double* p = logits.data();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = p + i * classes;
        std::size_t best = 0;
        for (std::size_t c = 1; c < classes; ++c)
            if (row[c] > row[best]) best = c;
        if (static_cast<int>(best) == labels[i]) ++hits;
    }
    return hits;
}

void check_labels(const Dataset& data, std::size_t classes, const char* who) {
    for (const Example& ex : data.examples)
        if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= classes)
            throw InputError(std::string(who) + ": label out of range");
}

}  // namespace

Adam::Adam(std::vector<NamedParam> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& [name, p] : params_) {
        (void)name;
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = params_[k].second;
        if (!p.has_grad()) continue;
        double* w = p.data();
        const double* g = p.grad();
        double* m = m_[k].data();
        double* v = v_[k].data();
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) {
        (void)name;
        p.zero_grad();
    }
}

std::size_t Adam::num_params() const {
    std::size_t total = 0;
    for (const auto& [name, p] : params_) {
        (void)name;
        total += p.numel();
    }
    return total;
}

void validate_train_options(const TrainOptions& opts) {
    if (!(opts.lr >= 0.0) || !std::isfinite(opts.lr))
        throw ConfigError("lr must be finite and >= 0");
    if (opts.batch_size == 0) throw ConfigError("batch_size must be positive");
    if (opts.max_epochs == 0) throw ConfigError("max_epochs must be positive");
    if (opts.patience == 0 || opts.patience > opts.max_epochs)
        throw ConfigError("patience must lie in [1, max_epochs]");
    if (opts.stop_train_acc < 0.0 || opts.stop_train_acc > 1.0)
        throw ConfigError("stop_train_acc must lie in [0, 1]");
}

Metrics train(FrozenEncoder& model, const Dataset& train_set, const Dataset& eval_set,
              const TrainOptions& opts) {
    validate_train_options(opts);
    if (model.sites.empty()) throw PlanError("train: model has no adapters attached");
    const std::size_t seq = uniform_length(train_set, "train");
    if (train_set.classes != model.cfg.classes)
        throw ConfigError("dataset classes do not match model head");
    check_labels(train_set, model.cfg.classes, "train");
    if (!eval_set.examples.empty()) check_labels(eval_set, model.cfg.classes, "train");

    const std::size_t n = train_set.examples.size();
    Adam adam(named_trainable(model), opts.lr);

    Dataset eval_part = eval_set;
    if (opts.eval_subset > 0 && eval_part.examples.size() > opts.eval_subset)
        eval_part.examples.resize(opts.eval_subset);

    Metrics out;
    out.trainable_params = trainable_param_count(model);
    std::vector<std::size_t> order(n);
    std::vector<int> tokens;
    std::vector<int> labels;
    std::size_t stale = 0;
    const double t_start = now_seconds();

    for (std::size_t epoch = 0; epoch < opts.max_epochs; ++epoch) {
        const double t_epoch = now_seconds();
        // Streams restart every epoch, so runs with lr == 0 repeat exactly.
        Rng shuffle_rng(opts.seed ^ kShuffleStream);
        Rng drop_rng(opts.seed ^ kDropoutStream);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t hit_sum = 0;
        for (std::size_t begin = 0; begin < n; begin += opts.batch_size) {
            const std::size_t end = std::min(begin + opts.batch_size, n);
            gather_batch(train_set, order, begin, end, seq, tokens, labels);

            Tape tape;
            double loss_value = 0.0;
            try {
                TapeScope scope(tape);
                ForwardOptions fwd;
                fwd.training = true;
                fwd.rng = &drop_rng;
                Tensor logits = encoder_forward(model, tokens, end - begin, seq, fwd);
                Tensor loss = cross_entropy(logits, labels);
                loss_value = loss.data()[0];
                if (!std::isfinite(loss_value))
                    throw NumericError("non-finite loss");
                tape.backward(loss);
                hit_sum += count_correct(logits, labels);
            } catch (const NumericError& e) {
                throw TrainError(std::string(e.what()) + " at epoch " + std::to_string(epoch));
            }
            adam.step();
            adam.zero_grad();
            loss_sum += loss_value * static_cast<double>(end - begin);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(n);
        rec.train_acc = static_cast<double>(hit_sum) / static_cast<double>(n);
        rec.eval_acc = eval_part.examples.empty()
                           ? 0.0
                           : evaluate(model, eval_part, opts.batch_size).accuracy;
        rec.seconds = now_seconds() - t_epoch;
        out.epochs.push_back(rec);
        out.final_train_acc = rec.train_acc;

        if (rec.eval_acc > out.best_eval_acc || out.epochs.size() == 1) {
            out.best_eval_acc = rec.eval_acc;
            out.best_epoch = epoch;
            stale = 0;
        } else {
            ++stale;
        }
        if (opts.stop_train_acc > 0.0 && rec.train_acc >= opts.stop_train_acc) break;
        if (stale >= opts.patience) {
            out.early_stopped = true;
            break;
        }
    }
    out.total_seconds = now_seconds() - t_start;
    return out;
}

Metrics train(FrozenEncoder& model, const TaskSpec& task, const TrainOptions& opts) {
    return train(model, gen_task(task), gen_task_eval(task), opts);
}

EvalResult evaluate(const FrozenEncoder& model, const Dataset& data, std::size_t batch_size) {
    if (data.examples.empty()) throw InputError("evaluate: empty dataset");
    if (batch_size == 0) throw ConfigError("evaluate: batch_size must be positive");
    check_labels(data, model.cfg.classes, "evaluate");

    std::map<std::size_t, std::vector<std::size_t>> bins;
    for (std::size_t i = 0; i < data.examples.size(); ++i)
        bins[data.examples[i].tokens.size()].push_back(i);

    EvalResult out;
    std::vector<int> tokens;
    std::vector<int> labels;
    std::size_t total_hits = 0;
    for (const auto& [len, idx] : bins) {
        std::size_t hits = 0;
        for (std::size_t begin = 0; begin < idx.size(); begin += batch_size) {
            const std::size_t end = std::min(begin + batch_size, idx.size());
            tokens.clear();
            labels.clear();
            for (std::size_t i = begin; i < end; ++i) {
                const Example& ex = data.examples[idx[i]];
                tokens.insert(tokens.end(), ex.tokens.begin(), ex.tokens.end());
                labels.push_back(ex.label);
            }
            Tensor logits = encoder_forward(model, tokens, end - begin, len);
            hits += count_correct(logits, labels);
        }
        LengthBin bin;
        bin.seq_len = len;
        bin.count = idx.size();
        bin.accuracy = static_cast<double>(hits) / static_cast<double>(idx.size());
        out.by_length.push_back(bin);
        total_hits += hits;
    }
    out.count = data.examples.size();
    out.accuracy = static_cast<double>(total_hits) / static_cast<double>(out.count);
    return out;
}

GradcheckReport gradcheck(FrozenEncoder& model, const Dataset& data,
                          std::size_t coords_per_matrix, double delta, std::uint64_t seed,
                          std::size_t batch_size) {
    if (coords_per_matrix == 0) throw ConfigError("gradcheck: need at least one coordinate");
    if (!(delta > 0.0)) throw ConfigError("gradcheck: delta must be positive");
    const std::size_t seq = uniform_length(data, "gradcheck");
    check_labels(data, model.cfg.classes, "gradcheck");

    const std::size_t n = std::min(batch_size, data.examples.size());
    std::vector<int> tokens;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n; ++i) {
        const Example& ex = data.examples[i];
        tokens.insert(tokens.end(), ex.tokens.begin(), ex.tokens.end());
        labels.push_back(ex.label);
    }

    std::vector<NamedParam> params;
    for (auto& np : named_trainable(model))
        if (np.first.rfind("head.", 0) != 0) params.push_back(np);

    // One live pass records the recurrent hand-offs and the analytic grads.
    StateTrace trace;
    std::vector<std::vector<double>> analytic(params.size());
    {
        Tape tape;
        TapeScope scope(tape);
        ForwardOptions fwd;
        fwd.record = &trace;
        Tensor logits = encoder_forward(model, tokens, n, seq, fwd);
        Tensor loss = cross_entropy(logits, labels);
        tape.backward(loss);
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor& p = params[k].second;
            analytic[k].assign(p.numel(), 0.0);
            if (p.has_grad())
                std::copy(p.grad(), p.grad() + p.numel(), analytic[k].begin());
            p.zero_grad();
        }
    }

    auto loss_at = [&]() {
        ForwardOptions fwd;
        fwd.pins = &trace;
        Tensor logits = encoder_forward(model, tokens, n, seq, fwd);
        Tensor loss = cross_entropy(logits, labels);
        return loss.data()[0];
    };

    GradcheckReport report;
    Rng coord_rng(seed ^ kCoordStream);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = params[k].second;
        const std::size_t numel = p.numel();
        std::vector<std::size_t> coords(numel);
        for (std::size_t i = 0; i < numel; ++i) coords[i] = i;
        const std::size_t take = std::min(coords_per_matrix, numel);
        for (std::size_t i = 0; i < take; ++i) {
            std::size_t j = i + static_cast<std::size_t>(coord_rng.below(numel - i));
            std::swap(coords[i], coords[j]);
        }

        CoordCheck matrix_worst;
        matrix_worst.name = params[k].first;
        for (std::size_t i = 0; i < take; ++i) {
            const std::size_t c = coords[i];
            double* w = p.data();
            const double saved = w[c];
            w[c] = saved + delta;
            const double up = loss_at();
            w[c] = saved - delta;
            const double down = loss_at();
            w[c] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("gradcheck: non-finite loss under perturbation");
            const double fd = (up - down) / (2.0 * delta);
            const double ad = analytic[k][c];
            const double scale = std::max(std::max(std::fabs(ad), std::fabs(fd)), 1e-6);
            const double rel = std::fabs(ad - fd) / scale;
            ++report.coords_checked;
            if (rel >= matrix_worst.rel_err) {
                matrix_worst.coord = c;
                matrix_worst.analytic = ad;
                matrix_worst.numeric = fd;
                matrix_worst.rel_err = rel;
            }
        }
        report.per_matrix.push_back(matrix_worst);
        if (matrix_worst.rel_err > report.max_rel_err) {
            report.max_rel_err = matrix_worst.rel_err;
            report.worst = matrix_worst;
        }
    }
    return report;
}

}  // namespace ssmlora
