#pragma once

// One-shot groupwise registration: network weights are initialized from a
// seed and optimized on the single case being registered. Each iteration runs
// forward -> warp -> implicit template -> loss -> backward -> Adam step, then
// evaluates the stopping rule on the similarity loss.

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "groupreg/losses.hpp"
#include "groupreg/regnet.hpp"
#include "groupreg/volume.hpp"

namespace groupreg {

struct RegConfig {
    NetConfig net;
    LossWeights weights;
    double learning_rate = 0.01;
    int n_stop = 100;
    double sigma_stop = 0.0007;
    int n_iter_min = 200;
    int max_iters = 3000;
    std::uint64_t seed = 0;
    bool cyclic_enabled = true;

    void validate() const;
    /// Loss weights with lambda1 zeroed when the cyclic term is disabled.
    LossWeights effective_weights() const;
};

enum class StopReason { none, criteria_met, max_iters, non_finite };

std::string to_string(StopReason r);
StopReason stop_reason_from_string(const std::string& s);

struct RegReport {
    std::vector<LossBreakdown> loss_trace;
    StopReason stop_reason = StopReason::none;
    int iterations = 0;
    double wall_time = 0.0;  // seconds
    std::uint64_t seed = 0;
};

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    /// One bias-corrected Adam update of every parameter in place.
    void update(NetWeights& weights, const std::vector<std::vector<double>>& grads, double learning_rate);
};

/// Complete optimizer state; enough to continue a run bit-for-bit.
struct Checkpoint {
    RegConfig config;
    NetWeights weights;
    AdamState adam;
    Dims3 group_dims{};
    int num_phases = 0;
    int iterations = 0;
    /// True when the current weights produced the last trace entry and have
    /// not been updated since.
    bool pending_update = false;
    std::vector<LossBreakdown> trace;
    std::deque<double> window;
    std::optional<double> running_min;
    StopReason stop_reason = StopReason::none;
};

struct RegistrationResult {
    FieldSet fields;
    RegReport report;
    Checkpoint state;
};

using ProgressCallback = std::function<void(int iteration, const LossBreakdown& loss)>;

/// Voxelwise mean of the warped group.
Volume implicit_template(const ImageGroup& warped);

/// Population standard deviation.
double population_std(std::span<const double> values);

/// True iff (i) the window is full and its population std is below
/// sigma_stop, (ii) running_min <= current <= running_min + sigma_stop / 3,
/// and (iii) iter_count > n_iter_min. `running_min` is the minimum over
/// iterations before the current one (empty at the first iteration).
bool should_stop(std::span<const double> recent_losses, std::optional<double> running_min, double current,
                 int iter_count, const RegConfig& config);

RegistrationResult register_group(const ImageGroup& group, const RegConfig& config,
                                  const ProgressCallback& progress = {});

/// Continues from a checkpoint until `config.max_iters` total iterations (or
/// the stopping rule). With `additional_iters` set, at most that many more
/// iterations run; zero just re-evaluates the stored weights.
RegistrationResult resume(const Checkpoint& checkpoint, const ImageGroup& group, const RegConfig& config,
                          std::optional<int> additional_iters = std::nullopt, const ProgressCallback& progress = {});

/// Loss and parameter gradients for given weights, as used by each iteration.
struct StepEvaluation {
    LossBreakdown loss;
    std::vector<std::vector<double>> grads;  // empty unless requested
    std::vector<double> fields;              // packed, original grid
};

StepEvaluation evaluate_step(const NetWeights& weights, const ImageGroup& group, const LossWeights& loss_weights,
                             bool want_gradient);

/// Archive layout is documented in docs/formats.md.
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Delimited text: iteration,similarity,smoothness,cyclic,total.
void write_loss_trace(const std::vector<LossBreakdown>& trace, const std::filesystem::path& path);
std::vector<LossBreakdown> read_loss_trace(const std::filesystem::path& path);

} // namespace groupreg
