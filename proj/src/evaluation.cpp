#include "groupreg/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace groupreg {

namespace fs = std::filesystem;

TREStats compute_stats(std::vector<double> errors) {
    TREStats s;
    s.errors = std::move(errors);
    if (s.errors.empty()) return s;
    const double k = static_cast<double>(s.errors.size());
    double sum = 0.0, sq = 0.0;
    for (double e : s.errors) {
        sum += e;
        sq += e * e;
    }
    s.mean = sum / k;
    double var = 0.0;
    for (double e : s.errors) var += (e - s.mean) * (e - s.mean);
    s.std = std::sqrt(var / k);
    s.rmse = std::sqrt(sq / k);
    for (std::size_t t = 0; t < TREStats::kThresholds.size(); ++t) {
        std::size_t below = 0;
        for (double e : s.errors) below += e <= TREStats::kThresholds[t] ? 1 : 0;
        s.fraction_below[t] = static_cast<double>(below) / k;
    }
    return s;
}

TREStats tre(const LandmarkSet& moved, const LandmarkSet& reference, const Vec3& spacing) {
    if (moved.size() != reference.size()) {
        throw Error("count_mismatch", "landmark sets differ in size: " + std::to_string(moved.size()) + " vs " +
                                          std::to_string(reference.size()));
    }
    if (moved.convention != reference.convention) {
        throw Error("landmark_convention", "landmark sets use different index conventions");
    }
    std::vector<double> errors;
    errors.reserve(moved.size());
    for (std::size_t k = 0; k < moved.size(); ++k) {
        double sq = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double d = (moved.points[k][a] - reference.points[k][a]) * spacing[a];
            sq += d * d;
        }
        errors.push_back(std::sqrt(sq));
    }
    return compute_stats(std::move(errors));
}

Evaluation evaluate_registration(const FieldSet& fields, const LandmarkSet& source, const LandmarkSet& target,
                                 std::size_t m, std::size_t n, const Vec3& spacing, const InversionParams& params) {
    const InversionResult pair = pairwise_field(fields, m, n, params);
    const LandmarkSet moved = transport_landmarks(source, pair.field);
    return Evaluation{tre(moved, target, spacing), pair.converged, m, n};
}

std::vector<Evaluation> evaluate_phases(const FieldSet& fields, const PhaseLandmarks& source,
                                        const std::vector<PhaseLandmarks>& targets, const Vec3& spacing,
                                        const InversionParams& params) {
    std::vector<Evaluation> out;
    for (const auto& t : targets) {
        out.push_back(evaluate_registration(fields, source.landmarks, t.landmarks, source.phase, t.phase, spacing, params));
    }
    return out;
}

Repeatability repeatability(const std::vector<LandmarkSet>& runs, const Vec3& spacing) {
    if (runs.size() < 2) throw Error("too_few_runs", "repeatability needs at least 2 runs");
    const std::size_t k = runs.front().size();
    for (const auto& r : runs) {
        if (r.size() != k) throw Error("count_mismatch", "repeated runs must carry the same landmarks");
    }
    std::vector<double> distances;
    distances.reserve(k * runs.size());
    for (std::size_t i = 0; i < k; ++i) {
        Vec3 mean{0.0, 0.0, 0.0};
        for (const auto& r : runs) {
            for (int a = 0; a < 3; ++a) mean[a] += r.points[i][a];
        }
        for (double& c : mean) c /= static_cast<double>(runs.size());
        for (const auto& r : runs) {
            double sq = 0.0;
            for (int a = 0; a < 3; ++a) sq += std::pow((r.points[i][a] - mean[a]) * spacing[a], 2);
            distances.push_back(std::sqrt(sq));
        }
    }
    const TREStats s = compute_stats(std::move(distances));
    return {s.mean, s.std};
}

Histogram tre_histogram(const std::vector<double>& errors, double bin_width, std::size_t bins) {
    if (!(bin_width > 0.0) || bins == 0) throw Error("invalid_histogram", "histogram needs positive bin width and count");
    Histogram h{bin_width, std::vector<std::size_t>(bins, 0)};
    for (double e : errors) {
        const auto b = static_cast<std::size_t>(std::max(0.0, std::floor(e / bin_width)));
        ++h.counts[std::min(b, bins - 1)];
    }
    return h;
}

nlohmann::json stats_to_json(const TREStats& s, bool include_errors) {
    nlohmann::json j{{"count", s.errors.size()}, {"mean_mm", s.mean}, {"std_mm", s.std}, {"rmse_mm", s.rmse}};
    nlohmann::json below = nlohmann::json::object();
    for (std::size_t t = 0; t < TREStats::kThresholds.size(); ++t) {
        std::ostringstream key;
        key << TREStats::kThresholds[t];
        below[key.str()] = s.fraction_below[t];
    }
    j["fraction_below_mm"] = below;
    if (include_errors) j["errors_mm"] = s.errors;
    return j;
}

std::string format_stats_table(const std::vector<std::pair<std::string, TREStats>>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(18) << "pair" << std::right << std::setw(6) << "K" << std::setw(16) << "mean+-std mm"
       << std::setw(10) << "rmse" << std::setw(8) << "<=1mm" << std::setw(8) << "<=2mm" << '\n';
    os << std::fixed;
    for (const auto& [name, s] : rows) {
        std::ostringstream ms;
        ms << std::fixed << std::setprecision(2) << s.mean << "+-" << s.std;
        os << std::left << std::setw(18) << name << std::right << std::setw(6) << s.errors.size() << std::setw(16)
           << ms.str() << std::setw(10) << std::setprecision(2) << s.rmse << std::setw(8) << std::setprecision(2)
           << s.fraction_below[0] << std::setw(8) << s.fraction_below[2] << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------

void write_pgm(const GrayImage& image, const fs::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("io_error", "cannot write " + path.string());
    os << "P5\n" << image.width << ' ' << image.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!os) throw Error("io_error", "failed writing " + path.string());
}

GrayImage read_pgm(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    std::string magic;
    int maxval = 0;
    GrayImage img;
    is >> magic >> img.width >> img.height >> maxval;
    if (!is || magic != "P5" || maxval != 255) throw Error("format_error", path.string() + " is not an 8-bit PGM");
    is.get();
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw Error("format_error", path.string() + ": truncated pixel data");
    return img;
}

unsigned char difference_to_gray(double diff, double range) {
    const double v = std::round(127.5 + 127.5 * diff / range);
    return static_cast<unsigned char>(std::clamp(v, 0.0, 255.0));
}

namespace {

// Rows/cols of a slice: axis 0 -> (y, x), axis 1 -> (z, x), axis 2 -> (z, y).
std::pair<int, int> slice_shape(const Dims3& d, int axis) {
    if (axis == 0) return {d[1], d[2]};
    if (axis == 1) return {d[0], d[2]};
    return {d[0], d[1]};
}

std::size_t slice_voxel(const Grid3& g, const SliceSpec& s, int row, int col) {
    if (s.axis == 0) return g.index(s.index, row, col);
    if (s.axis == 1) return g.index(row, s.index, col);
    return g.index(row, col, s.index);
}

void check_slice(const Grid3& g, const SliceSpec& s) {
    if (s.axis < 0 || s.axis > 2) throw Error("invalid_slice", "slice axis must be 0, 1 or 2");
    if (s.index < 0 || s.index >= g.dims[s.axis]) {
        throw Error("invalid_slice", "slice index " + std::to_string(s.index) + " outside [0, " +
                                         std::to_string(g.dims[s.axis] - 1) + "]");
    }
}

} // namespace

std::vector<std::vector<double>> difference_slices(const ImageGroup& group, const FieldSet& fields, const Volume& tmpl,
                                                   const SliceSpec& slice, const InversionParams& params) {
    check_slice(group.grid(), slice);
    if (fields.size() != group.size() || !fields.grid().compatible(group.grid()) ||
        !tmpl.grid().compatible(group.grid())) {
        throw Error("dims_mismatch", "difference maps need a group, field set and template on one grid");
    }
    const auto [rows, cols] = slice_shape(group.grid().dims, slice.axis);
    std::vector<std::vector<double>> out;
    for (std::size_t n = 0; n < group.size(); ++n) {
        const Volume mapped = warp(tmpl, invert_field(fields[n], params).field);
        std::vector<double> diff(static_cast<std::size_t>(rows) * cols);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const std::size_t i = slice_voxel(group.grid(), slice, r, c);
                diff[static_cast<std::size_t>(r) * cols + c] = group[n][i] - mapped[i];
            }
        out.push_back(std::move(diff));
    }
    return out;
}

std::vector<fs::path> export_difference_maps(const ImageGroup& group, const FieldSet& fields, const Volume& tmpl,
                                             const SliceSpec& slice, const fs::path& out_dir, double range,
                                             const InversionParams& params) {
    if (!(range > 0.0)) throw Error("invalid_range", "difference range must be positive");
    const auto slices = difference_slices(group, fields, tmpl, slice, params);
    const auto [rows, cols] = slice_shape(group.grid().dims, slice.axis);
    fs::create_directories(out_dir);
    std::vector<fs::path> written;
    for (std::size_t n = 0; n < slices.size(); ++n) {
        const std::string stem = "diff_" + group.phase_labels()[n];
        GrayImage img{cols, rows, std::vector<unsigned char>(slices[n].size())};
        for (std::size_t i = 0; i < slices[n].size(); ++i) img.pixels[i] = difference_to_gray(slices[n][i], range);
        write_pgm(img, out_dir / (stem + ".pgm"));
        std::ofstream csv(out_dir / (stem + ".csv"));
        csv.precision(9);
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < cols; ++c) csv << (c ? "," : "") << slices[n][static_cast<std::size_t>(r) * cols + c];
            csv << '\n';
        }
        written.push_back(out_dir / (stem + ".pgm"));
    }
    return written;
}

void write_histogram(const Histogram& h, const fs::path& pgm, const fs::path& csv) {
    {
        std::ofstream os(csv);
        if (!os) throw Error("io_error", "cannot write " + csv.string());
        os << "bin_start_mm,bin_end_mm,count\n";
        for (std::size_t b = 0; b < h.counts.size(); ++b) {
            os << b * h.bin_width << ',' << (b + 1) * h.bin_width << ',' << h.counts[b] << '\n';
        }
    }
    const int bar = 12, height = 160;
    GrayImage img{bar * static_cast<int>(h.counts.size()), height,
                  std::vector<unsigned char>(static_cast<std::size_t>(bar) * h.counts.size() * height, 255)};
    std::size_t peak = 1;
    for (auto c : h.counts) peak = std::max(peak, c);
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
        const int filled = static_cast<int>(std::lround(static_cast<double>(h.counts[b]) / peak * (height - 1)));
        for (int r = height - filled; r < height; ++r)
            for (int c = 1; c < bar - 1; ++c) img.pixels[static_cast<std::size_t>(r) * img.width + b * bar + c] = 0;
    }
    write_pgm(img, pgm);
}

void write_loss_curve(const std::vector<LossBreakdown>& trace, const fs::path& pgm) {
    const int width = 480, height = 200;
    GrayImage img{width, height, std::vector<unsigned char>(static_cast<std::size_t>(width) * height, 255)};
    if (!trace.empty()) {
        double lo = trace.front().similarity, hi = lo;
        for (const auto& l : trace) {
            lo = std::min(lo, l.similarity);
            hi = std::max(hi, l.similarity);
        }
        if (hi - lo < 1e-12) hi = lo + 1e-12;
        int prev_row = -1;
        for (int col = 0; col < width; ++col) {
            const std::size_t i = trace.size() == 1 ? 0 : col * (trace.size() - 1) / (width - 1);
            const int row = static_cast<int>(std::lround((hi - trace[i].similarity) / (hi - lo) * (height - 1)));
            const int a = prev_row < 0 ? row : std::min(row, prev_row);
            const int b = prev_row < 0 ? row : std::max(row, prev_row);
            for (int r = a; r <= b; ++r) img.pixels[static_cast<std::size_t>(r) * width + col] = 0;
            prev_row = row;
        }
    }
    write_pgm(img, pgm);
}

} // namespace groupreg
