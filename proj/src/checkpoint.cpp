#include <cmath>
#include <fstream>
#include <sstream>

#include "groupreg/serialization.hpp"

namespace groupreg {

using nlohmann::json;

void to_json(json& j, const NetConfig& c) {
    j = json{{"num_phases", c.num_phases},         {"num_downscales", c.num_downscales},
             {"base_channels", c.base_channels},   {"inference_scale", c.inference_scale},
             {"leaky_slope", c.leaky_slope},       {"kernel_size", c.kernel_size}};
}

void from_json(const json& j, NetConfig& c) {
    j.at("num_phases").get_to(c.num_phases);
    j.at("num_downscales").get_to(c.num_downscales);
    j.at("base_channels").get_to(c.base_channels);
    j.at("inference_scale").get_to(c.inference_scale);
    j.at("leaky_slope").get_to(c.leaky_slope);
    j.at("kernel_size").get_to(c.kernel_size);
}

void to_json(json& j, const LossWeights& w) {
    j = json{{"lambda0", w.lambda0},
             {"lambda1", w.lambda1},
             {"ncc_window", w.ncc_window},
             {"block_template_gradient", w.block_template_gradient}};
}

void from_json(const json& j, LossWeights& w) {
    j.at("lambda0").get_to(w.lambda0);
    j.at("lambda1").get_to(w.lambda1);
    j.at("ncc_window").get_to(w.ncc_window);
    w.block_template_gradient = j.value("block_template_gradient", false);
}

void to_json(json& j, const RegConfig& c) {
    j = json{{"net", c.net},
             {"weights", c.weights},
             {"learning_rate", c.learning_rate},
             {"n_stop", c.n_stop},
             {"sigma_stop", c.sigma_stop},
             {"n_iter_min", c.n_iter_min},
             {"max_iters", c.max_iters},
             {"seed", c.seed},
             {"cyclic_enabled", c.cyclic_enabled}};
}

void from_json(const json& j, RegConfig& c) {
    j.at("net").get_to(c.net);
    j.at("weights").get_to(c.weights);
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("n_stop").get_to(c.n_stop);
    j.at("sigma_stop").get_to(c.sigma_stop);
    j.at("n_iter_min").get_to(c.n_iter_min);
    j.at("max_iters").get_to(c.max_iters);
    j.at("seed").get_to(c.seed);
    j.at("cyclic_enabled").get_to(c.cyclic_enabled);
}

void to_json(json& j, const LossBreakdown& l) { j = json::array({l.similarity, l.smoothness, l.cyclic, l.total}); }

void from_json(const json& j, LossBreakdown& l) {
    l.similarity = j.at(0).get<double>();
    l.smoothness = j.at(1).get<double>();
    l.cyclic = j.at(2).get<double>();
    l.total = j.at(3).get<double>();
}

json report_to_json(const RegReport& report) {
    json j{{"stop_reason", to_string(report.stop_reason)},
           {"iterations", report.iterations},
           {"wall_time_s", report.wall_time},
           {"seed", report.seed}};
    if (!report.loss_trace.empty()) {
        const auto& last = report.loss_trace.back();
        double best = last.similarity;
        for (const auto& l : report.loss_trace) best = std::min(best, l.similarity);
        j["final_loss"] = {{"similarity", last.similarity},
                           {"smoothness", last.smoothness},
                           {"cyclic", last.cyclic},
                           {"total", last.total}};
        j["min_similarity"] = best;
        j["first_similarity"] = report.loss_trace.front().similarity;
    }
    return j;
}

namespace {

constexpr const char* kMagic = "GROUPREG-CKPT 1";

} // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    json header;
    header["config"] = ck.config;
    header["group_dims"] = ck.group_dims;
    header["num_phases"] = ck.num_phases;
    header["iterations"] = ck.iterations;
    header["pending_update"] = ck.pending_update;
    header["stop_reason"] = to_string(ck.stop_reason);
    header["running_min"] = ck.running_min ? json(*ck.running_min) : json(nullptr);
    header["window"] = std::vector<double>(ck.window.begin(), ck.window.end());
    header["trace"] = ck.trace;
    header["net"] = ck.weights.config;
    header["adam"] = {{"beta1", ck.adam.beta1}, {"beta2", ck.adam.beta2}, {"epsilon", ck.adam.epsilon},
                      {"step", ck.adam.step}};

    std::vector<const std::vector<double>*> payload;
    json arrays = json::array();
    std::uint64_t offset = 0;
    auto add = [&](const std::string& name, const std::vector<int>& shape, const std::vector<double>& values) {
        arrays.push_back({{"name", name}, {"shape", shape}, {"offset", offset}, {"count", values.size()}});
        offset += values.size() * sizeof(double);
        payload.push_back(&values);
    };
    const bool has_moments = !ck.adam.m.empty();
    for (std::size_t k = 0; k < ck.weights.params.size(); ++k) {
        const auto& p = ck.weights.params[k];
        add("weights/" + p.name, p.shape, p.values);
        if (has_moments) {
            add("adam_m/" + p.name, p.shape, ck.adam.m[k]);
            add("adam_v/" + p.name, p.shape, ck.adam.v[k]);
        }
    }
    header["arrays"] = arrays;
    const std::string text = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("io_error", "cannot write checkpoint " + path.string());
    os << kMagic << '\n' << text.size() << '\n' << text;
    for (const auto* values : payload) binary::write_le<double>(os, *values);
    if (!os) throw Error("io_error", "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("io_error", "cannot open checkpoint " + path.string());
    std::string magic, size_line;
    std::getline(is, magic);
    std::getline(is, size_line);
    if (magic != kMagic) throw Error("format_error", path.string() + " is not a checkpoint archive");
    const std::size_t header_size = std::stoull(size_line);
    std::string text(header_size, '\0');
    is.read(text.data(), static_cast<std::streamsize>(header_size));
    const auto payload_start = is.tellg();
    const json header = json::parse(text);

    Checkpoint ck;
    ck.config = header.at("config").get<RegConfig>();
    ck.group_dims = header.at("group_dims").get<Dims3>();
    ck.num_phases = header.at("num_phases").get<int>();
    ck.iterations = header.at("iterations").get<int>();
    ck.pending_update = header.at("pending_update").get<bool>();
    ck.stop_reason = stop_reason_from_string(header.at("stop_reason").get<std::string>());
    if (!header.at("running_min").is_null()) ck.running_min = header.at("running_min").get<double>();
    for (double w : header.at("window").get<std::vector<double>>()) ck.window.push_back(w);
    ck.trace = header.at("trace").get<std::vector<LossBreakdown>>();
    const auto& adam = header.at("adam");
    ck.adam.beta1 = adam.at("beta1").get<double>();
    ck.adam.beta2 = adam.at("beta2").get<double>();
    ck.adam.epsilon = adam.at("epsilon").get<double>();
    ck.adam.step = adam.at("step").get<long>();

    // Shapes come from the config; the archive must agree with them.
    ck.weights = build_network(header.at("net").get<NetConfig>(), 0);
    const std::size_t n = ck.weights.params.size();
    for (const auto& entry : header.at("arrays")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto slash = name.find('/');
        const std::string kind = name.substr(0, slash);
        const std::string pname = name.substr(slash + 1);
        std::size_t k = 0;
        while (k < n && ck.weights.params[k].name != pname) ++k;
        if (k == n) throw Error("format_error", "checkpoint array " + name + " does not belong to the network");
        std::vector<double>* target = nullptr;
        if (kind == "weights") {
            target = &ck.weights.params[k].values;
        } else if (kind == "adam_m" || kind == "adam_v") {
            if (ck.adam.m.empty()) {
                for (const auto& p : ck.weights.params) {
                    ck.adam.m.emplace_back(p.values.size(), 0.0);
                    ck.adam.v.emplace_back(p.values.size(), 0.0);
                }
            }
            target = kind == "adam_m" ? &ck.adam.m[k] : &ck.adam.v[k];
        } else {
            throw Error("format_error", "unknown checkpoint array kind " + kind);
        }
        if (entry.at("count").get<std::size_t>() != target->size() ||
            entry.at("shape").get<std::vector<int>>() != ck.weights.params[k].shape) {
            throw Error("format_error", "checkpoint array " + name + " has an unexpected shape");
        }
        is.seekg(payload_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
        binary::read_le<double>(is, *target);
        if (!is) throw Error("format_error", "checkpoint payload truncated at " + name);
    }
    return ck;
}

void write_loss_trace(const std::vector<LossBreakdown>& trace, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw Error("io_error", "cannot write " + path.string());
    os << "iteration,similarity,smoothness,cyclic,total\n";
    os.precision(17);
    for (std::size_t i = 0; i < trace.size(); ++i) {
        const auto& l = trace[i];
        os << i + 1 << ',' << l.similarity << ',' << l.smoothness << ',' << l.cyclic << ',' << l.total << '\n';
    }
}

std::vector<LossBreakdown> read_loss_trace(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error("io_error", "cannot open " + path.string());
    std::string line;
    std::getline(is, line);
    std::vector<LossBreakdown> trace;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(ls, cell, ',')) v.push_back(std::stod(cell));
        if (v.size() != 5) throw Error("format_error", "malformed loss trace row: " + line);
        trace.push_back({v[1], v[2], v[3], v[4]});
    }
    return trace;
}

} // namespace groupreg
