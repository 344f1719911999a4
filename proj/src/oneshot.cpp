#include "groupreg/oneshot.hpp"

#include <chrono>
#include <cmath>
#include <limits>

#include "groupreg/interp.hpp"

namespace groupreg {

void RegConfig::validate() const {
    net.validate();
    weights.validate();
    if (!(learning_rate > 0.0)) throw Error("invalid_config", "learning_rate must be positive");
    if (n_stop < 2) throw Error("invalid_config", "n_stop must be >= 2");
    if (!(sigma_stop > 0.0)) throw Error("invalid_config", "sigma_stop must be positive");
    if (n_iter_min < 1) throw Error("invalid_config", "n_iter_min must be >= 1");
    if (max_iters < n_iter_min) throw Error("invalid_config", "max_iters must be >= n_iter_min");
}

LossWeights RegConfig::effective_weights() const {
    LossWeights w = weights;
    if (!cyclic_enabled) w.lambda1 = 0.0;
    return w;
}

std::string to_string(StopReason r) {
    switch (r) {
        case StopReason::criteria_met: return "criteria_met";
        case StopReason::max_iters: return "max_iters";
        case StopReason::non_finite: return "non_finite";
        case StopReason::none: break;
    }
    return "none";
}

StopReason stop_reason_from_string(const std::string& s) {
    if (s == "criteria_met") return StopReason::criteria_met;
    if (s == "max_iters") return StopReason::max_iters;
    if (s == "non_finite") return StopReason::non_finite;
    if (s == "none") return StopReason::none;
    throw Error("invalid_stop_reason", "unknown stop reason '" + s + "'");
}

void AdamState::update(NetWeights& weights, const std::vector<std::vector<double>>& grads, double learning_rate) {
    if (m.empty()) {
        for (const auto& p : weights.params) {
            m.emplace_back(p.values.size(), 0.0);
            v.emplace_back(p.values.size(), 0.0);
        }
    }
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t k = 0; k < weights.params.size(); ++k) {
        auto& w = weights.params[k].values;
        const auto& g = grads[k];
        auto& mk = m[k];
        auto& vk = v[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            mk[i] = beta1 * mk[i] + (1.0 - beta1) * g[i];
            vk[i] = beta2 * vk[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = mk[i] / c1;
            const double vhat = vk[i] / c2;
            w[i] -= learning_rate * mhat / (std::sqrt(vhat) + epsilon);
        }
    }
}

Volume implicit_template(const ImageGroup& warped) {
    const std::size_t v = warped.grid().size();
    std::vector<double> mean(v, 0.0);
    for (const auto& w : warped.volumes()) {
        for (std::size_t i = 0; i < v; ++i) mean[i] += w[i];
    }
    const double inv = 1.0 / static_cast<double>(warped.size());
    for (double& x : mean) x *= inv;
    return Volume(warped.grid(), std::move(mean));
}

double population_std(std::span<const double> values) {
    if (values.empty()) return 0.0;
    double mean = 0.0;
    for (double x : values) mean += x;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double x : values) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(values.size()));
}

bool should_stop(std::span<const double> recent_losses, std::optional<double> running_min, double current,
                 int iter_count, const RegConfig& config) {
    const bool window_stable = static_cast<int>(recent_losses.size()) >= config.n_stop &&
                               population_std(recent_losses.last(config.n_stop)) < config.sigma_stop;
    const bool near_minimum =
        running_min.has_value() && current >= *running_min && current <= *running_min + config.sigma_stop / 3.0;
    const bool enough_iterations = iter_count > config.n_iter_min;
    return window_stable && near_minimum && enough_iterations;
}

namespace {

bool finite(const LossBreakdown& l) {
    return std::isfinite(l.similarity) && std::isfinite(l.smoothness) && std::isfinite(l.cyclic) &&
           std::isfinite(l.total);
}

struct ForwardPass {
    ForwardCache cache;
    Tensor output;
    std::vector<double> fields;  // packed, original grid
    GroupObjective objective;
};

ForwardPass run_forward(const NetWeights& weights, const ImageGroup& group, const Tensor& input,
                        const LossWeights& loss_weights, bool want_gradient) {
    ForwardPass fp;
    fp.output = network_forward(weights, input, want_gradient ? &fp.cache : nullptr);
    interp::Resampler(fp.output.dims, group.grid().dims).apply(fp.output.data, fp.output.channels, fp.fields);
    fp.objective = evaluate_group_objective(group, fp.fields, loss_weights, want_gradient);
    return fp;
}

std::vector<std::vector<double>> run_backward(const NetWeights& weights, const ForwardPass& fp,
                                              const Dims3& group_dims) {
    Tensor grad_out{fp.output.channels, fp.output.dims, {}};
    interp::Resampler(fp.output.dims, group_dims).adjoint(fp.objective.grad_fields, grad_out.channels, grad_out.data);
    return network_backward(weights, fp.cache, grad_out);
}

FieldSet unpack(const std::vector<double>& packed, const ImageGroup& group) {
    const std::size_t v = group.grid().size();
    std::vector<DisplacementField> fields;
    for (std::size_t n = 0; n < group.size(); ++n) {
        fields.emplace_back(group.grid(),
                            std::vector<double>(packed.begin() + 3 * n * v, packed.begin() + 3 * (n + 1) * v));
    }
    return FieldSet::for_group(group, std::move(fields));
}

void check_compatible(const ImageGroup& group, const RegConfig& config) {
    config.validate();
    if (static_cast<int>(group.size()) != config.net.num_phases) {
        throw Error("count_mismatch", "config expects " + std::to_string(config.net.num_phases) +
                                          " phases, group has " + std::to_string(group.size()));
    }
    config.net.level_dims(group.grid().dims);
}

RegistrationResult run(Checkpoint state, const ImageGroup& group, const RegConfig& config, int limit,
                       const ProgressCallback& progress) {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    const LossWeights loss_weights = config.effective_weights();
    const Tensor input = stack_group(group, config.net);
    std::optional<FieldSet> last_fields;

    auto finish = [&](StopReason reason) {
        state.stop_reason = reason;
        RegReport report{state.trace, reason, state.iterations,
                         std::chrono::duration<double>(clock::now() - start).count(), config.seed};
        FieldSet fields = last_fields ? *last_fields : FieldSet::zeros(group.grid(), group.size());
        return RegistrationResult{std::move(fields), std::move(report), std::move(state)};
    };

    if (state.pending_update) {
        ForwardPass fp;
        try {
            fp = run_forward(state.weights, group, input, loss_weights, state.iterations < limit);
        } catch (const Error& e) {
            if (e.code() != "non_finite") throw;
            return finish(StopReason::non_finite);
        }
        last_fields = unpack(fp.fields, group);
        if (state.iterations >= limit) {
            return finish(state.stop_reason == StopReason::none ? StopReason::max_iters : state.stop_reason);
        }
        state.adam.update(state.weights, run_backward(state.weights, fp, group.grid().dims), config.learning_rate);
        state.pending_update = false;
    }

    for (;;) {
        if (state.iterations >= limit) {
            // Only reachable when resuming with no iterations left.
            last_fields = unpack(run_forward(state.weights, group, input, loss_weights, false).fields, group);
            state.pending_update = true;
            return finish(StopReason::max_iters);
        }
        ForwardPass fp;
        try {
            fp = run_forward(state.weights, group, input, loss_weights, true);
        } catch (const Error& e) {
            if (e.code() != "non_finite") throw;
            return finish(StopReason::non_finite);
        }
        const LossBreakdown& loss = fp.objective.loss;
        if (!finite(loss)) return finish(StopReason::non_finite);

        last_fields = unpack(fp.fields, group);
        state.iterations += 1;
        state.trace.push_back(loss);
        state.window.push_back(loss.similarity);
        while (static_cast<int>(state.window.size()) > config.n_stop) state.window.pop_front();
        state.pending_update = true;
        if (progress) progress(state.iterations, loss);

        const std::vector<double> window(state.window.begin(), state.window.end());
        const bool stop = should_stop(window, state.running_min, loss.similarity, state.iterations, config);
        state.running_min = state.running_min ? std::min(*state.running_min, loss.similarity) : loss.similarity;
        if (stop) return finish(StopReason::criteria_met);
        if (state.iterations >= limit) return finish(StopReason::max_iters);

        state.adam.update(state.weights, run_backward(state.weights, fp, group.grid().dims), config.learning_rate);
        state.pending_update = false;
    }
}

} // namespace

StepEvaluation evaluate_step(const NetWeights& weights, const ImageGroup& group, const LossWeights& loss_weights,
                             bool want_gradient) {
    const Tensor input = stack_group(group, weights.config);
    ForwardPass fp = run_forward(weights, group, input, loss_weights, want_gradient);
    StepEvaluation out;
    out.loss = fp.objective.loss;
    if (want_gradient) out.grads = run_backward(weights, fp, group.grid().dims);
    out.fields = std::move(fp.fields);
    return out;
}

RegistrationResult register_group(const ImageGroup& group, const RegConfig& config, const ProgressCallback& progress) {
    check_compatible(group, config);
    Checkpoint state;
    state.config = config;
    state.weights = build_network(config.net, config.seed);
    state.group_dims = group.grid().dims;
    state.num_phases = static_cast<int>(group.size());
    return run(std::move(state), group, config, config.max_iters, progress);
}

RegistrationResult resume(const Checkpoint& checkpoint, const ImageGroup& group, const RegConfig& config,
                          std::optional<int> additional_iters, const ProgressCallback& progress) {
    check_compatible(group, config);
    if (checkpoint.num_phases != static_cast<int>(group.size())) {
        throw Error("count_mismatch", "checkpoint holds " + std::to_string(checkpoint.num_phases) +
                                          " phases, group has " + std::to_string(group.size()));
    }
    if (checkpoint.group_dims != group.grid().dims) {
        throw Error("dims_mismatch", "checkpoint grid " + to_string(checkpoint.group_dims) + " differs from group grid " +
                                         to_string(group.grid().dims));
    }
    if (!(checkpoint.config.net == config.net) || !(checkpoint.weights.config == config.net)) {
        throw Error("config_mismatch", "network configuration differs from the checkpoint");
    }
    if (additional_iters && *additional_iters < 0) throw Error("invalid_config", "additional iterations must be >= 0");
    int limit = config.max_iters;
    if (additional_iters) limit = std::min(limit, checkpoint.iterations + *additional_iters);
    Checkpoint state = checkpoint;
    state.config = config;
    return run(std::move(state), group, config, limit, progress);
}

} // namespace groupreg
