#pragma once

// Deterministic paired (volume, report) generator with planted lesions and
// per-sentence ground-truth patch sets.
//
// Each present lesion type contributes one blob and one findings sentence
// naming its type and the octant of its center. Volumes are written in HU;
// the training pipeline normalizes them.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "simcrop/error.hpp"
#include "simcrop/rng.hpp"
#include "simcrop/text.hpp"
#include "simcrop/volume.hpp"

namespace simcrop {

enum class LesionShape { solid, shell };

struct LesionType {
    std::string name;
    LesionShape shape;
    double radius_min, radius_max;  // in-plane voxels; z radius is scaled by spacing ratio
    double contrast_hu;             // added to background inside the blob
};

inline const std::vector<LesionType>& lesion_types() {
    static const std::vector<LesionType> types{
        {"nodule", LesionShape::solid, 2.0, 3.0, 700.0},
        {"mass", LesionShape::solid, 4.0, 5.0, 550.0},
        {"calcification", LesionShape::solid, 1.2, 1.8, 1500.0},
        {"cyst", LesionShape::shell, 3.0, 4.0, 650.0},
    };
    return types;
}

struct GenConfig {
    Dims3 dims{32, 32, 16};
    Spacing3 spacing{1.5, 1.5, 3.0};
    Dims3 patch_dims{8, 8, 4};
    std::size_t lesion_min = 1;
    std::size_t lesion_max = 4;
    double prevalence = 0.5;  ///< target fraction of samples carrying each type
    double background_hu = -800.0;
    double smooth_amplitude_hu = 60.0;
    double noise_hu = 20.0;
    double max_lesion_fraction = 0.10;
    int placement_retries = 200;
    double radius_scale = 1.0;  ///< multiplies every lesion radius (small volumes)
};

struct SyntheticSample {
    std::uint64_t seed = 0;
    Volume volume;  ///< HU
    std::string report_text;
    std::vector<std::string> sentences;
    std::vector<std::vector<std::size_t>> sentence_truth;  ///< sorted patch indices per sentence
    std::vector<std::vector<std::size_t>> lesion_voxels;   ///< voxel indices per sentence
    std::vector<std::size_t> sentence_type;
    std::vector<std::uint8_t> labels;  ///< one per lesion type
};

/// Every word and mark the report templates can emit.
inline Vocab synthetic_vocab() {
    std::vector<std::string> words{
        ".", ",", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
        "a", "an", "and", "with", "in", "the", "is", "are", "of", "seen", "noted", "present",
        "there", "measuring", "mm", "cm", "small", "thin", "walled", "dense", "solid",
        "lung", "region", "zone", "field",
        "upper", "lower", "left", "right", "anterior", "posterior",
        "findings", "consistent", "no", "other", "abnormality", "otherwise", "identified",
    };
    for (const auto& t : lesion_types()) words.push_back(t.name);
    return Vocab(words);
}

namespace detail {

/// Probability of including each type independently so that, after
/// rejecting subsets whose size falls outside [lo, hi], each type's
/// marginal prevalence equals `target`.
inline double inclusion_probability(std::size_t n_types, std::size_t lo, std::size_t hi,
                                    double target) {
    auto conditional = [&](double q) {
        double accept = 0.0, with_type = 0.0;
        for (std::size_t k = lo; k <= std::min(hi, n_types); ++k) {
            // C(n, k) q^k (1-q)^(n-k); a fixed type is present in k/n of those subsets
            double c = 1.0;
            for (std::size_t i = 0; i < k; ++i)
                c = c * static_cast<double>(n_types - i) / static_cast<double>(i + 1);
            const double p = c * std::pow(q, static_cast<double>(k)) *
                             std::pow(1.0 - q, static_cast<double>(n_types - k));
            accept += p;
            with_type += p * static_cast<double>(k) / static_cast<double>(n_types);
        }
        return accept > 0.0 ? with_type / accept : 0.0;
    };
    double a = 1e-6, b = 1.0 - 1e-6;
    if (target <= conditional(a)) return a;
    if (target >= conditional(b)) return b;
    for (int it = 0; it < 100; ++it) {
        const double m = 0.5 * (a + b);
        (conditional(m) < target ? a : b) = m;
    }
    return 0.5 * (a + b);
}

inline std::string octant_phrase(const Dims3& dims, double cx, double cy, double cz) {
    std::string s = cz < 0.5 * static_cast<double>(dims[2]) ? "upper" : "lower";
    s += cx < 0.5 * static_cast<double>(dims[0]) ? " right" : " left";
    s += cy < 0.5 * static_cast<double>(dims[1]) ? " anterior" : " posterior";
    return s;
}

inline std::string format_decimal(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << v;
    return os.str();
}

inline std::string lesion_sentence(std::size_t type, double radius_mm, const std::string& where) {
    switch (type) {
    case 0:
        return "A " + std::to_string(static_cast<int>(std::lround(2.0 * radius_mm))) +
               " mm solid nodule is seen in the " + where + " lung.";
    case 1:
        return "There is a mass measuring " + format_decimal(2.0 * radius_mm / 10.0) + " cm in the " +
               where + " region.";
    case 2:
        return "Small dense calcification noted in the " + where + " zone.";
    default:
        return "A thin walled cyst is present in the " + where + " field.";
    }
}

} // namespace detail

inline SyntheticSample generate_sample(std::uint64_t seed, const GenConfig& cfg) {
    const auto& types = lesion_types();
    const Dims3 grid = grid_dims_for(cfg.dims, cfg.patch_dims);
    if (cfg.lesion_min < 1 || cfg.lesion_min > cfg.lesion_max || cfg.lesion_min > types.size())
        throw ValueError("generate_sample: lesion count range must satisfy 1 <= min <= max <= " +
                         std::to_string(types.size()));
    Rng rng(seed, 0x5eedULL);
    SyntheticSample s;
    s.seed = seed;

    // Background: low-frequency cosine field plus white noise.
    Volume vol(cfg.dims, cfg.spacing, 0.0f);
    struct Wave {
        double kx, ky, kz, phase, amp;
    };
    std::vector<Wave> waves;
    for (int i = 0; i < 4; ++i) {
        waves.push_back({(rng.uniform() * 2.0 + 0.5) / static_cast<double>(cfg.dims[0]),
                         (rng.uniform() * 2.0 + 0.5) / static_cast<double>(cfg.dims[1]),
                         (rng.uniform() * 2.0 + 0.5) / static_cast<double>(cfg.dims[2]),
                         rng.uniform() * 2.0 * std::numbers::pi, cfg.smooth_amplitude_hu * 0.5});
    }
    for (std::size_t z = 0; z < cfg.dims[2]; ++z)
        for (std::size_t y = 0; y < cfg.dims[1]; ++y)
            for (std::size_t x = 0; x < cfg.dims[0]; ++x) {
                double v = cfg.background_hu;
                for (const auto& w : waves)
                    v += w.amp * std::cos(2.0 * std::numbers::pi *
                                              (w.kx * static_cast<double>(x) + w.ky * static_cast<double>(y) +
                                               w.kz * static_cast<double>(z)) +
                                          w.phase);
                v += cfg.noise_hu * rng.normal();
                vol.at(x, y, z) = static_cast<float>(v);
            }

    // Which types are present.
    const double q = detail::inclusion_probability(types.size(), cfg.lesion_min, cfg.lesion_max,
                                                   cfg.prevalence);
    std::vector<std::size_t> present;
    for (int attempt = 0;; ++attempt) {
        present.clear();
        for (std::size_t t = 0; t < types.size(); ++t)
            if (rng.uniform() < q) present.push_back(t);
        if (present.size() >= cfg.lesion_min && present.size() <= cfg.lesion_max) break;
        if (attempt > 10000) throw ValueError("generate_sample: cannot satisfy lesion count range");
    }
    shuffle(present, rng);

    // Place blobs with disjoint (1-voxel padded) bounding boxes.
    const double z_scale = cfg.spacing[0] / cfg.spacing[2];
    struct Box {
        long x0, x1, y0, y1, z0, z1;
    };
    // A dead end (no room for one lesion) restarts placement from the lesion-free volume.
    const Volume background = vol;
    for (int round = 0;; ++round) {
        vol = background;
        s.sentences.clear();
        s.sentence_truth.clear();
        s.lesion_voxels.clear();
        s.sentence_type.clear();
        std::vector<Box> boxes;
        std::vector<std::uint8_t> occupied(vol.size(), 0);
        std::size_t lesion_total = 0;
        s.labels.assign(types.size(), 0);
        bool complete = true;
        for (std::size_t t : present) {
            const LesionType& lt = types[t];
            bool placed = false;
            for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
                const double r = cfg.radius_scale * (lt.radius_min + (lt.radius_max - lt.radius_min) * rng.uniform());
                const double rz = std::max(0.75, r * z_scale);
                const auto ext = [](double rad) { return static_cast<long>(std::ceil(rad)); };
                const long ex = ext(r), ez = ext(rz);
                const long lo_x = ex, hi_x = static_cast<long>(cfg.dims[0]) - 1 - ex;
                const long lo_z = ez, hi_z = static_cast<long>(cfg.dims[2]) - 1 - ez;
                if (hi_x < lo_x || hi_z < lo_z) break;
                const long cx = lo_x + static_cast<long>(rng.below(static_cast<std::uint32_t>(hi_x - lo_x + 1)));
                const long cy = lo_x + static_cast<long>(rng.below(static_cast<std::uint32_t>(
                                            static_cast<long>(cfg.dims[1]) - 1 - ex - lo_x + 1)));
                const long cz = lo_z + static_cast<long>(rng.below(static_cast<std::uint32_t>(hi_z - lo_z + 1)));
                Box b{cx - ex - 1, cx + ex + 1, cy - ex - 1, cy + ex + 1, cz - ez - 1, cz + ez + 1};
                const bool overlap = std::any_of(boxes.begin(), boxes.end(), [&](const Box& o) {
                    return b.x0 <= o.x1 && o.x0 <= b.x1 && b.y0 <= o.y1 && o.y0 <= b.y1 && b.z0 <= o.z1 &&
                           o.z0 <= b.z1;
                });
                if (overlap) continue;

                std::vector<std::size_t> voxels;
                for (long z = cz - ez; z <= cz + ez; ++z)
                    for (long y = cy - ex; y <= cy + ex; ++y)
                        for (long x = cx - ex; x <= cx + ex; ++x) {
                            const double dx = static_cast<double>(x - cx) / r;
                            const double dy = static_cast<double>(y - cy) / r;
                            const double dz = static_cast<double>(z - cz) / rz;
                            const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                            const bool inside = lt.shape == LesionShape::solid
                                                    ? d <= 1.0
                                                    : (d <= 1.0 && d >= 1.0 - 1.0 / r);
                            if (inside)
                                voxels.push_back(vol.index(static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                                                           static_cast<std::size_t>(z)));
                        }
                if (voxels.empty()) continue;
                if (static_cast<double>(lesion_total + voxels.size()) >
                    cfg.max_lesion_fraction * static_cast<double>(vol.size()))
                    continue;

                for (std::size_t vi : voxels) {
                    vol.voxels[vi] += static_cast<float>(lt.contrast_hu);
                    occupied[vi] = 1;
                }
                lesion_total += voxels.size();
                boxes.push_back(b);

                std::set<std::size_t> patches;
                for (std::size_t vi : voxels) {
                    const std::size_t x = vi % cfg.dims[0];
                    const std::size_t y = (vi / cfg.dims[0]) % cfg.dims[1];
                    const std::size_t z = vi / (cfg.dims[0] * cfg.dims[1]);
                    patches.insert(patch_index_of(grid, cfg.patch_dims, x, y, z));
                }
                const std::string where = detail::octant_phrase(cfg.dims, static_cast<double>(cx),
                                                                static_cast<double>(cy), static_cast<double>(cz));
                s.sentences.push_back(detail::lesion_sentence(t, r * cfg.spacing[0], where));
                s.sentence_truth.emplace_back(patches.begin(), patches.end());
                s.lesion_voxels.push_back(std::move(voxels));
                s.sentence_type.push_back(t);
                s.labels[t] = 1;
                placed = true;
            }
            if (!placed) {
                if (round >= 50)
                    throw ValueError("generate_sample: could not place a " + lt.name + " lesion for seed " +
                                     std::to_string(seed));
                complete = false;
                break;
            }
        }
        if (complete) break;
    }

    std::string findings;
    for (const auto& sent : s.sentences) findings += (findings.empty() ? "" : " ") + sent;
    std::vector<std::string> names;
    for (std::size_t t = 0; t < types.size(); ++t)
        if (s.labels[t]) names.push_back(types[t].name);
    std::string impression = "Findings consistent with ";
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (i > 0) impression += i + 1 == names.size() ? " and " : ", ";
        impression += names[i];
    }
    impression += ". No other abnormality identified.";
    s.report_text = "FINDINGS: " + findings + "\nIMPRESSION: " + impression + "\n";
    s.volume = std::move(vol);
    return s;
}

// ---------------------------------------------------------------------------
// Corpus files
// ---------------------------------------------------------------------------

inline std::string sample_stem(std::size_t i) {
    std::ostringstream os;
    os << "sample_" << std::setw(5) << std::setfill('0') << i;
    return os.str();
}

/// "sentence_index: patch_idx,patch_idx,..."
inline std::string encode_truth(const std::vector<std::vector<std::size_t>>& truth) {
    std::ostringstream os;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        os << i << ':';
        for (std::size_t j = 0; j < truth[i].size(); ++j) os << (j ? "," : " ") << truth[i][j];
        os << '\n';
    }
    return os.str();
}

inline std::vector<std::vector<std::size_t>> decode_truth(const std::string& text) {
    std::vector<std::vector<std::size_t>> out;
    std::istringstream is(text);
    for (std::string line; std::getline(is, line);) {
        if (line.empty()) continue;
        auto colon = line.find(':');
        if (colon == std::string::npos) throw FormatError(FormatErrc::corrupt, "truth line '" + line + "'");
        if (std::stoul(line.substr(0, colon)) != out.size())
            throw FormatError(FormatErrc::corrupt, "truth lines out of order");
        std::vector<std::size_t> idx;
        std::istringstream items(line.substr(colon + 1));
        for (std::string tok; std::getline(items, tok, ',');) {
            auto t = detail::trim(tok);
            if (!t.empty()) idx.push_back(std::stoul(std::string(t)));
        }
        out.push_back(std::move(idx));
    }
    return out;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(FormatErrc::io, "cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError(FormatErrc::io, "cannot write " + path);
    f << text;
    if (!f) throw FormatError(FormatErrc::io, "write failed for " + path);
}

struct ManifestEntry {
    std::string sample_id;
    std::string volume_path;  ///< relative to the corpus directory
    std::string report_path;
    std::string truth_path;
    std::vector<std::uint8_t> labels;
};

inline std::string manifest_header() {
    std::string h = "sample_id,volume_path,report_path,truth_path";
    for (const auto& t : lesion_types()) h += ",label_" + t.name;
    return h;
}

/// Writes n samples (seeds seed+i) plus manifest.csv and vocab.txt into dir.
inline std::vector<ManifestEntry> generate_corpus(const std::string& dir, std::uint64_t seed,
                                                  std::size_t n, const GenConfig& cfg) {
    if (n < 1) throw ValueError("generate_corpus: n must be >= 1");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw FormatError(FormatErrc::io, "cannot create " + dir + ": " + ec.message());

    std::vector<ManifestEntry> entries;
    std::ostringstream manifest;
    manifest << manifest_header() << '\n';
    for (std::size_t i = 0; i < n; ++i) {
        const SyntheticSample s = generate_sample(seed + i, cfg);
        ManifestEntry e;
        e.sample_id = sample_stem(i);
        e.volume_path = e.sample_id + ".svol";
        e.report_path = e.sample_id + ".txt";
        e.truth_path = e.sample_id + ".truth";
        e.labels = s.labels;
        write_svol((fs::path(dir) / e.volume_path).string(), s.volume);
        write_text_file((fs::path(dir) / e.report_path).string(), s.report_text);
        write_text_file((fs::path(dir) / e.truth_path).string(), encode_truth(s.sentence_truth));
        std::string label_row;
        for (std::size_t t = 0; t < s.labels.size(); ++t) label_row += (t ? "," : "") + std::to_string(s.labels[t]);
        write_text_file((fs::path(dir) / (e.sample_id + ".labels.csv")).string(), label_row + "\n");
        manifest << e.sample_id << ',' << e.volume_path << ',' << e.report_path << ',' << e.truth_path;
        for (auto l : e.labels) manifest << ',' << static_cast<int>(l);
        manifest << '\n';
        entries.push_back(std::move(e));
    }
    write_text_file((fs::path(dir) / "manifest.csv").string(), manifest.str());
    synthetic_vocab().save((fs::path(dir) / "vocab.txt").string());
    return entries;
}

inline std::vector<ManifestEntry> read_manifest(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string text = read_text_file((fs::path(dir) / "manifest.csv").string());
    std::istringstream is(text);
    std::string header;
    std::getline(is, header);
    if (header != manifest_header())
        throw FormatError(FormatErrc::corrupt, dir + "/manifest.csv: unexpected header");
    std::vector<ManifestEntry> out;
    for (std::string line; std::getline(is, line);) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream ls(line);
        for (std::string c; std::getline(ls, c, ',');) cols.push_back(c);
        if (cols.size() != 4 + lesion_types().size())
            throw FormatError(FormatErrc::corrupt, dir + "/manifest.csv: bad row '" + line + "'");
        ManifestEntry e{cols[0], cols[1], cols[2], cols[3], {}};
        for (std::size_t t = 0; t < lesion_types().size(); ++t)
            e.labels.push_back(static_cast<std::uint8_t>(cols[4 + t] == "1"));
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace simcrop
