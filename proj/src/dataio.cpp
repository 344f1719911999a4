#include "groupreg/dataio.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"

#include "groupreg/serialization.hpp"

namespace groupreg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

LandmarkConvention convention_from_string(const std::string& s) {
    if (s == "one-based" || s == "one_based") return LandmarkConvention::one_based;
    if (s == "zero-based" || s == "zero_based") return LandmarkConvention::zero_based;
    throw Error("manifest_error", "unknown landmark convention '" + s + "'");
}

AxisOrder axis_order_from_string(const std::string& s) {
    if (s == "xyz") return AxisOrder::xyz;
    if (s == "zyx") return AxisOrder::zyx;
    throw Error("manifest_error", "unknown axis order '" + s + "'");
}

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_absolute() ? p : base / p; }

} // namespace

CaseMeta load_manifest(const fs::path& manifest, const std::optional<fs::path>& root) {
    std::ifstream is(manifest);
    if (!is) throw Error("io_error", "cannot open manifest " + manifest.string());
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw Error("manifest_error", manifest.string() + ": " + e.what());
    }
    const fs::path base = root ? *root : manifest.parent_path();
    CaseMeta m;
    try {
        m.case_id = j.at("case_id").get<std::string>();
        m.dims = j.at("dims").get<Dims3>();
        m.spacing = j.at("spacing").get<Vec3>();
        m.intensity_offset = j.value("intensity_offset", 0.0);
        m.intensity_divisor = j.value("intensity_divisor", 1000.0);
        m.crop_margin = j.value("crop_margin", 8);
        for (const auto& p : j.at("phases")) {
            m.phases.push_back({p.at("label").get<std::string>(), resolve(p.at("path").get<std::string>(), base)});
        }
        for (const auto& l : j.value("landmarks", json::array())) {
            m.landmarks.push_back({resolve(l.at("path").get<std::string>(), base), l.at("phase_index").get<std::size_t>(),
                                   convention_from_string(l.value("convention", std::string("one-based"))),
                                   axis_order_from_string(l.value("axis_order", std::string("xyz")))});
        }
    } catch (const json::exception& e) {
        throw Error("manifest_error", manifest.string() + ": " + e.what());
    }
    Grid3::make(m.dims, m.spacing);
    return m;
}

Volume read_raw_int16(const fs::path& path, const Grid3& grid) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw Error("io_error", "cannot open volume " + path.string());
    const auto actual = static_cast<std::uintmax_t>(is.tellg());
    const std::uintmax_t expected = 2 * grid.size();
    if (actual != expected) {
        throw Error("size_mismatch", path.string() + ": expected " + std::to_string(expected) + " bytes for " +
                                         to_string(grid.dims) + " int16 voxels, found " + std::to_string(actual));
    }
    is.seekg(0);
    std::vector<std::int16_t> raw(grid.size());
    binary::read_le<std::int16_t>(is, raw);
    if (!is) throw Error("io_error", "failed reading " + path.string());
    return Volume(grid, std::vector<double>(raw.begin(), raw.end()));
}

LandmarkSet read_landmarks(const fs::path& path, LandmarkConvention convention, AxisOrder order) {
    std::ifstream is(path);
    if (!is) throw Error("io_error", "cannot open landmark file " + path.string());
    LandmarkSet lm;
    lm.convention = convention;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        std::istringstream ls(line);
        double a, b, c;
        if (!(ls >> a)) continue;  // blank line
        if (!(ls >> b >> c)) {
            throw Error("format_error", path.string() + ":" + std::to_string(line_no) + ": expected three coordinates");
        }
        lm.points.push_back(order == AxisOrder::xyz ? Vec3{c, b, a} : Vec3{a, b, c});
    }
    return lm;
}

void write_landmarks(const LandmarkSet& lm, const fs::path& path, AxisOrder order) {
    std::ofstream os(path);
    if (!os) throw Error("io_error", "cannot write " + path.string());
    os.precision(17);
    for (const auto& p : lm.points) {
        if (order == AxisOrder::xyz) {
            os << p[2] << '\t' << p[1] << '\t' << p[0] << '\n';
        } else {
            os << p[0] << '\t' << p[1] << '\t' << p[2] << '\n';
        }
    }
}

CaseData load_case(const CaseMeta& meta) {
    const Grid3 grid = Grid3::make(meta.dims, meta.spacing);
    std::vector<Volume> volumes;
    std::vector<std::string> labels;
    for (const auto& p : meta.phases) {
        volumes.push_back(read_raw_int16(p.path, grid));
        labels.push_back(p.label);
    }
    CaseData data{ImageGroup(std::move(volumes), std::move(labels)), {}, {}};
    for (const auto& l : meta.landmarks) {
        if (l.phase_index >= data.group.size()) {
            throw Error("manifest_error", "landmark file " + l.path.string() + " refers to a missing phase");
        }
        const LandmarkSet raw = read_landmarks(l.path, l.convention, l.axis_order);
        data.landmarks.push_back(convert_landmarks(raw, LandmarkConvention::zero_based, grid));
        data.landmark_phases.push_back(l.phase_index);
    }
    return data;
}

Volume normalize(const Volume& volume, double divisor, double offset) {
    if (divisor == 0.0 || !std::isfinite(divisor)) throw Error("invalid_divisor", "normalization divisor must be non-zero");
    std::vector<double> out(volume.data().begin(), volume.data().end());
    for (double& v : out) v = (v - offset) / divisor;
    return Volume(volume.grid(), std::move(out));
}

CropBox landmark_crop_box(const Grid3& grid, const std::vector<LandmarkSet>& landmark_sets, int margin) {
    Vec3 lo{INFINITY, INFINITY, INFINITY}, hi{-INFINITY, -INFINITY, -INFINITY};
    std::size_t count = 0;
    for (const auto& set : landmark_sets) {
        if (set.convention != LandmarkConvention::zero_based) {
            throw Error("landmark_convention", "cropping expects zero-based landmarks");
        }
        check_inside(set, grid);
        for (const auto& p : set.points) {
            for (int a = 0; a < 3; ++a) {
                lo[a] = std::min(lo[a], p[a]);
                hi[a] = std::max(hi[a], p[a]);
            }
            ++count;
        }
    }
    if (count == 0) throw Error("empty_landmarks", "cannot crop to an empty landmark union");
    CropBox box;
    for (int a = 0; a < 3; ++a) {
        box.lo[a] = std::max(0, static_cast<int>(std::floor(lo[a])) - margin);
        box.hi[a] = std::min(grid.dims[a] - 1, static_cast<int>(std::ceil(hi[a])) + margin);
    }
    return box;
}

CropResult crop(const ImageGroup& group, const std::vector<LandmarkSet>& landmark_sets, const CropBox& box) {
    const Grid3& g = group.grid();
    Dims3 dims{};
    for (int a = 0; a < 3; ++a) {
        if (box.lo[a] < 0 || box.hi[a] >= g.dims[a] || box.hi[a] - box.lo[a] < 1) {
            throw Error("invalid_crop", "crop box does not fit the grid " + to_string(g.dims));
        }
        dims[a] = box.hi[a] - box.lo[a] + 1;
    }
    const Grid3 out_grid = Grid3::make(dims, g.spacing);
    std::vector<Volume> volumes;
    for (const auto& v : group.volumes()) {
        std::vector<double> data;
        data.reserve(out_grid.size());
        for (int z = box.lo[0]; z <= box.hi[0]; ++z)
            for (int y = box.lo[1]; y <= box.hi[1]; ++y)
                for (int x = box.lo[2]; x <= box.hi[2]; ++x) data.push_back(v.at(z, y, x));
        volumes.emplace_back(out_grid, std::move(data));
    }
    CropResult result{ImageGroup(std::move(volumes), group.phase_labels()), {}, box.lo};
    for (const auto& set : landmark_sets) {
        LandmarkSet shifted = set;
        for (auto& p : shifted.points) {
            for (int a = 0; a < 3; ++a) p[a] -= box.lo[a];
        }
        check_inside(shifted, out_grid);
        result.landmarks.push_back(std::move(shifted));
    }
    return result;
}

CropResult crop_to_landmarks(const ImageGroup& group, const std::vector<LandmarkSet>& landmark_sets, int margin) {
    return crop(group, landmark_sets, landmark_crop_box(group.grid(), landmark_sets, margin));
}

// ---------------------------------------------------------------------------

void PhantomSpec::validate() const {
    Grid3::make(dims);
    if (num_phases < 2) throw Error("invalid_phantom", "a phantom needs at least 2 phases");
    const int min_dim = std::min({dims[0], dims[1], dims[2]});
    if (!(max_amplitude >= 0.0) || !(max_amplitude < min_dim / 8.0)) {
        throw Error("invalid_phantom", "phantom amplitude must be below min(dims)/8 = " + std::to_string(min_dim / 8.0));
    }
    if (num_landmarks < 0) throw Error("invalid_phantom", "landmark count must be non-negative");
}

namespace {

constexpr double kPi = std::numbers::pi;

double phase_scale(const PhantomSpec& spec, int n) {
    if (spec.periodic) return std::sin(2.0 * kPi * n / spec.num_phases);
    return static_cast<double>(n) / (spec.num_phases - 1);
}

struct Texture {
    struct Wave {
        Vec3 k;
        double phase;
        double amplitude;
    };
    struct Blob {
        Vec3 center;
        Vec3 radius;
        double value;
    };
    std::vector<Wave> waves;
    std::vector<Blob> blobs;

    double operator()(const Vec3& p) const {
        double v = 0.0;
        for (const auto& w : waves) v += w.amplitude * std::cos(w.k[0] * p[0] + w.k[1] * p[1] + w.k[2] * p[2] + w.phase);
        for (const auto& b : blobs) {
            double r2 = 0.0;
            for (int a = 0; a < 3; ++a) r2 += std::pow((p[a] - b.center[a]) / b.radius[a], 2);
            v += b.value / (1.0 + std::exp((std::sqrt(r2) - 1.0) / 0.08));
        }
        return v;
    }
};

Texture make_texture(const PhantomSpec& spec, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    Texture t;
    const int waves = 8;
    for (int i = 0; i < waves; ++i) {
        Vec3 dir{normal(rng), normal(rng), normal(rng)};
        const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        const double wavelength = 6.0 + 14.0 * unit(rng);
        for (double& c : dir) c *= 2.0 * kPi / (wavelength * norm);
        t.waves.push_back({dir, 2.0 * kPi * unit(rng), 0.3 / std::sqrt(waves / 2.0)});
    }
    for (int i = 0; i < 6; ++i) {
        Texture::Blob b{};
        for (int a = 0; a < 3; ++a) {
            b.center[a] = (0.2 + 0.6 * unit(rng)) * (spec.dims[a] - 1);
            b.radius[a] = (0.08 + 0.12 * unit(rng)) * spec.dims[a];
        }
        b.value = (unit(rng) < 0.5 ? -1.0 : 1.0) * (0.3 + 0.4 * unit(rng));
        t.blobs.push_back(b);
    }
    return t;
}

// Inverse displacement of the analytic field at p: v = -D(p + v).
Vec3 analytic_inverse(const PhantomSpec& spec, int phase, const Vec3& p) {
    Vec3 v{0.0, 0.0, 0.0};
    for (int it = 0; it < 200; ++it) {
        const Vec3 d = phantom_displacement(spec, phase, {p[0] + v[0], p[1] + v[1], p[2] + v[2]});
        double change = 0.0;
        for (int a = 0; a < 3; ++a) {
            change = std::max(change, std::abs(-d[a] - v[a]));
            v[a] = -d[a];
        }
        if (change < 1e-13) break;
    }
    return v;
}

} // namespace

Vec3 phantom_displacement(const PhantomSpec& spec, int phase, const Vec3& p) {
    Vec3 u{};
    for (int a = 0; a < 3; ++a) u[a] = p[a] / (spec.dims[a] - 1);
    double g = 1.0;
    for (int a = 0; a < 3; ++a) g *= std::pow(std::sin(kPi * u[a]), 2);
    const double s = spec.max_amplitude * phase_scale(spec, phase) * g;
    return {s, s * 0.5 * std::sin(kPi * u[2]), s * 0.5 * std::cos(kPi * u[1])};
}

Phantom make_phantom(const PhantomSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    const Texture texture = make_texture(spec, rng);
    const Grid3 grid = Grid3::make(spec.dims);
    const Dims3& d = spec.dims;

    std::vector<Volume> volumes;
    std::vector<DisplacementField> truth;
    for (int n = 0; n < spec.num_phases; ++n) {
        std::vector<double> image(grid.size());
        std::vector<double> field(3 * grid.size());
        std::size_t i = 0;
        for (int z = 0; z < d[0]; ++z)
            for (int y = 0; y < d[1]; ++y)
                for (int x = 0; x < d[2]; ++x, ++i) {
                    const Vec3 p{double(z), double(y), double(x)};
                    const Vec3 disp = phantom_displacement(spec, n, p);
                    for (int c = 0; c < 3; ++c) field[c * grid.size() + i] = disp[c];
                    const Vec3 inv = analytic_inverse(spec, n, p);
                    image[i] = texture({p[0] + inv[0], p[1] + inv[1], p[2] + inv[2]});
                }
        volumes.emplace_back(grid, std::move(image));
        truth.emplace_back(grid, std::move(field));
    }

    std::uniform_real_distribution<double> unit(0.25, 0.75);
    LandmarkSet anatomy;
    for (int k = 0; k < spec.num_landmarks; ++k) {
        anatomy.points.push_back({unit(rng) * (d[0] - 1), unit(rng) * (d[1] - 1), unit(rng) * (d[2] - 1)});
    }
    std::vector<LandmarkSet> landmarks;
    for (int n = 0; n < spec.num_phases; ++n) {
        LandmarkSet lm;
        for (const auto& q : anatomy.points) {
            const Vec3 disp = phantom_displacement(spec, n, q);
            lm.points.push_back({q[0] + disp[0], q[1] + disp[1], q[2] + disp[2]});
        }
        check_inside(lm, grid);
        landmarks.push_back(std::move(lm));
    }
    ImageGroup group(std::move(volumes));
    FieldSet fields = FieldSet::for_group(group, std::move(truth));
    return Phantom{std::move(group), std::move(fields), std::move(landmarks), std::move(anatomy)};
}

// ---------------------------------------------------------------------------

namespace {

constexpr const char* kFieldMagic = "GROUPREG-DVF 1";
constexpr const char* kVolumeMagic = "GROUPREG-VOL 1";

json read_header(std::istream& is, const char* magic, const fs::path& path) {
    std::string line;
    std::getline(is, line);
    if (line != magic) throw Error("format_error", path.string() + ": bad magic line");
    std::getline(is, line);
    try {
        return json::parse(line);
    } catch (const json::exception& e) {
        throw Error("format_error", path.string() + ": " + e.what());
    }
}

} // namespace

void write_field(const DisplacementField& field, const fs::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("io_error", "cannot write " + path.string());
    const json header{{"dims", field.dims()},
                      {"spacing", field.grid().spacing},
                      {"component_order", {"dz", "dy", "dx"}},
                      {"units", "voxel"},
                      {"layout", "component-major"},
                      {"dtype", "float32-le"}};
    os << kFieldMagic << '\n' << header.dump() << '\n';
    std::vector<float> payload(field.components().begin(), field.components().end());
    binary::write_le<float>(os, payload);
    if (!os) throw Error("io_error", "failed writing " + path.string());
}

DisplacementField read_field(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("io_error", "cannot open " + path.string());
    const json header = read_header(is, kFieldMagic, path);
    if (header.value("dtype", "") != "float32-le" || header.value("layout", "") != "component-major") {
        throw Error("format_error", path.string() + ": unsupported field encoding");
    }
    const Grid3 grid = Grid3::make(header.at("dims").get<Dims3>(), header.at("spacing").get<Vec3>());
    std::vector<float> payload(3 * grid.size());
    binary::read_le<float>(is, payload);
    if (!is) throw Error("format_error", path.string() + ": payload shorter than 3*D*H*W floats");
    return DisplacementField(grid, std::vector<double>(payload.begin(), payload.end()));
}

void write_volume(const Volume& volume, const fs::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("io_error", "cannot write " + path.string());
    const json header{{"dims", volume.dims()}, {"spacing", volume.grid().spacing}, {"dtype", "float64-le"}};
    os << kVolumeMagic << '\n' << header.dump() << '\n';
    binary::write_le<double>(os, volume.data());
    if (!os) throw Error("io_error", "failed writing " + path.string());
}

Volume read_volume(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("io_error", "cannot open " + path.string());
    const json header = read_header(is, kVolumeMagic, path);
    const Grid3 grid = Grid3::make(header.at("dims").get<Dims3>(), header.at("spacing").get<Vec3>());
    std::vector<double> data(grid.size());
    binary::read_le<double>(is, data);
    if (!is) throw Error("format_error", path.string() + ": payload truncated");
    return Volume(grid, std::move(data));
}

void write_fieldset(const FieldSetFile& set, const fs::path& dir) {
    fs::create_directories(dir);
    json files = json::array();
    for (std::size_t n = 0; n < set.fields.size(); ++n) {
        char name[32];
        std::snprintf(name, sizeof(name), "field_%02zu.dvf", n);
        write_field(set.fields[n], dir / name);
        files.push_back(name);
    }
    const json meta{{"num_fields", set.fields.size()},
                    {"phase_labels", set.phase_labels},
                    {"crop_offset", set.crop_offset},
                    {"files", files},
                    {"convention", "D maps template coordinates to phase coordinates: T(x) = x + D(x)"}};
    std::ofstream os(dir / "fieldset.json");
    os << meta.dump(2) << '\n';
    if (!os) throw Error("io_error", "cannot write " + (dir / "fieldset.json").string());
}

FieldSetFile read_fieldset(const fs::path& dir) {
    std::ifstream is(dir / "fieldset.json");
    if (!is) throw Error("io_error", "cannot open " + (dir / "fieldset.json").string());
    const json meta = json::parse(is);
    std::vector<DisplacementField> fields;
    for (const auto& f : meta.at("files")) fields.push_back(read_field(dir / f.get<std::string>()));
    return FieldSetFile{FieldSet(std::move(fields)), meta.value("phase_labels", std::vector<std::string>{}),
                        meta.value("crop_offset", Dims3{0, 0, 0})};
}

} // namespace groupreg
