#pragma once

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "skid/framekit.hpp"

namespace skid {

enum class LabelSchema { mrnet3, kneemri_binary, kneemri_ternary };

inline const char* schema_name(LabelSchema s) {
    switch (s) {
        case LabelSchema::mrnet3: return "mrnet3";
        case LabelSchema::kneemri_binary: return "kneemri_binary";
        default: return "kneemri_ternary";
    }
}

inline LabelSchema schema_from_name(const std::string& s) {
    if (s == "mrnet3") return LabelSchema::mrnet3;
    if (s == "kneemri_binary") return LabelSchema::kneemri_binary;
    if (s == "kneemri_ternary") return LabelSchema::kneemri_ternary;
    throw std::invalid_argument("unknown schema: " + s);
}

/// One MR clip: frames (F,H,W) normalized to [0,1] plus labels.
/// MRNet schema populates `labels`; the KneeMRI schemas populate `ternary`
/// (0 healthy / 1 partially injured / 2 completely ruptured) and the binary
/// mapping {0,1}->0, {2}->1 is applied at access time.
struct ClipVolume {
    std::string clip_id;
    Plane plane = Plane::sagittal;
    Tensor frames;  // (F, H, W)
    std::array<int, 3> labels{};
    int ternary = -1;

    std::size_t n_frames() const { return frames.dim(0); }

    Frame frame(std::size_t i) const {
        if (i >= n_frames()) throw std::out_of_range("ClipVolume::frame: index out of range");
        const std::size_t h = frames.dim(1), w = frames.dim(2);
        Frame f;
        f.plane = plane;
        f.pixels = Tensor({h, w});
        std::copy(frames.data() + i * h * w, frames.data() + (i + 1) * h * w, f.pixels.data());
        return f;
    }

    int binary_label() const { return ternary == 2 ? 1 : 0; }
};

// ---------------------------------------------------------------------------
// SKIDVOL container: magic "SKIDVOL1", little-endian u32 F,H,W, u8 dtype code
// (0=u8, 1=u16, 2=f32), then row-major frame data.

enum class VolDtype : std::uint8_t { u8 = 0, u16 = 1, f32 = 2 };

struct SkidvolData {
    std::uint32_t f = 0, h = 0, w = 0;
    VolDtype dtype = VolDtype::u8;
    std::vector<std::uint8_t> payload;  // raw, pre-normalization

    std::size_t bytes_per_value() const {
        return dtype == VolDtype::u8 ? 1 : dtype == VolDtype::u16 ? 2 : 4;
    }
    std::size_t expected_payload() const {
        return static_cast<std::size_t>(f) * h * w * bytes_per_value();
    }
};

constexpr char kVolMagic[8] = {'S', 'K', 'I', 'D', 'V', 'O', 'L', '1'};

inline void save_skidvol(const SkidvolData& v, const std::string& path) {
    if (v.payload.size() != v.expected_payload())
        throw std::invalid_argument("save_skidvol: payload size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_skidvol: cannot open " + path);
    out.write(kVolMagic, 8);
    out.write(reinterpret_cast<const char*>(&v.f), 4);
    out.write(reinterpret_cast<const char*>(&v.h), 4);
    out.write(reinterpret_cast<const char*>(&v.w), 4);
    const auto d = static_cast<std::uint8_t>(v.dtype);
    out.write(reinterpret_cast<const char*>(&d), 1);
    out.write(reinterpret_cast<const char*>(v.payload.data()),
              static_cast<std::streamsize>(v.payload.size()));
    if (!out) throw std::runtime_error("save_skidvol: write failed for " + path);
}

inline SkidvolData load_skidvol(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_skidvol: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || !std::equal(magic, magic + 8, kVolMagic))
        throw std::runtime_error("load_skidvol: bad magic at byte 0 in " + path);
    SkidvolData v;
    in.read(reinterpret_cast<char*>(&v.f), 4);
    in.read(reinterpret_cast<char*>(&v.h), 4);
    in.read(reinterpret_cast<char*>(&v.w), 4);
    std::uint8_t d = 0;
    in.read(reinterpret_cast<char*>(&d), 1);
    if (!in) throw std::runtime_error("load_skidvol: truncated header at byte 8 in " + path);
    if (d > 2) throw std::runtime_error("load_skidvol: unknown dtype code at byte 20 in " + path);
    v.dtype = static_cast<VolDtype>(d);
    if (v.f == 0 || v.h == 0 || v.w == 0 ||
        static_cast<std::uint64_t>(v.f) * v.h * v.w > (std::uint64_t{1} << 34))
        throw std::runtime_error("load_skidvol: implausible dimensions in header of " + path);
    v.payload.resize(v.expected_payload());
    in.read(reinterpret_cast<char*>(v.payload.data()),
            static_cast<std::streamsize>(v.payload.size()));
    if (static_cast<std::size_t>(in.gcount()) != v.payload.size())
        throw std::runtime_error("load_skidvol: truncated payload at byte " +
                                 std::to_string(21 + in.gcount()) + " in " + path);
    return v;
}

/// Lossless decode plus normalization to [0,1] by the dtype's full range
/// (f32 payloads are expected to be pre-normalized and pass through).
inline ClipVolume load_clip(const std::string& path) {
    const SkidvolData v = load_skidvol(path);
    ClipVolume clip;
    clip.frames = Tensor({v.f, v.h, v.w});
    const std::size_t n = static_cast<std::size_t>(v.f) * v.h * v.w;
    switch (v.dtype) {
        case VolDtype::u8:
            for (std::size_t i = 0; i < n; ++i)
                clip.frames[i] = static_cast<Scalar>(v.payload[i]) / 255.0;
            break;
        case VolDtype::u16:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint16_t x;
                std::memcpy(&x, v.payload.data() + 2 * i, 2);
                clip.frames[i] = static_cast<Scalar>(x) / 65535.0;
            }
            break;
        case VolDtype::f32:
            for (std::size_t i = 0; i < n; ++i) {
                float x;
                std::memcpy(&x, v.payload.data() + 4 * i, 4);
                clip.frames[i] = static_cast<Scalar>(x);
            }
            break;
    }
    return clip;
}

// ---------------------------------------------------------------------------
// Manifests. Layout on disk:
//   <root>/<split>_labels.csv
//   <root>/<split>/<plane>/<clip_id>.skidvol
// Labels CSV: "clip_id,abnormal,acl,meniscus" (mrnet3) or
// "clip_id,ligament_state" (kneemri schemas).

struct ManifestEntry {
    std::string clip_id;
    std::string path;
    std::array<int, 3> labels{};
    int ternary = -1;

    int binary_label() const { return ternary == 2 ? 1 : 0; }
};

struct DatasetManifest {
    std::string split;
    Plane plane = Plane::sagittal;
    LabelSchema schema = LabelSchema::mrnet3;
    std::vector<ManifestEntry> entries;
};

/// Loads a manifest and fail-fast validates every referenced clip: the file
/// must exist and carry an intact SKIDVOL header.
inline DatasetManifest load_manifest(const std::string& root, const std::string& split,
                                     Plane plane, LabelSchema schema) {
    namespace fs = std::filesystem;
    DatasetManifest m;
    m.split = split;
    m.plane = plane;
    m.schema = schema;

    const std::string csv_path = root + "/" + split + "_labels.csv";
    std::ifstream in(csv_path);
    if (!in) throw std::runtime_error("load_manifest: cannot open " + csv_path);
    std::string line;
    std::getline(in, line);  // header
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        ManifestEntry e;
        std::string tok;
        std::getline(ls, e.clip_id, ',');
        if (!seen.insert(e.clip_id).second)
            throw std::runtime_error("load_manifest: duplicate clip_id " + e.clip_id);
        if (schema == LabelSchema::mrnet3) {
            for (auto& l : e.labels) {
                std::getline(ls, tok, ',');
                l = std::stoi(tok);
            }
        } else {
            std::getline(ls, tok, ',');
            e.ternary = std::stoi(tok);
            if (e.ternary < 0 || e.ternary > 2)
                throw std::runtime_error("load_manifest: ligament_state must be 0/1/2, got " + tok);
        }
        e.path = root + "/" + split + "/" + plane_name(plane) + "/" + e.clip_id + ".skidvol";
        if (!fs::exists(e.path))
            throw std::runtime_error("load_manifest: missing clip file " + e.path);
        m.entries.push_back(std::move(e));
    }
    // header integrity of every clip before any training starts
    for (const auto& e : m.entries) (void)load_skidvol(e.path);
    return m;
}

/// Materialize every manifest entry, attaching ids, plane and labels.
/// KneeMRI ternary states collapse to binary on labels[0].
inline std::vector<ClipVolume> load_clips(const DatasetManifest& m) {
    std::vector<ClipVolume> clips;
    clips.reserve(m.entries.size());
    for (const auto& e : m.entries) {
        ClipVolume c = load_clip(e.path);
        c.clip_id = e.clip_id;
        c.plane = m.plane;
        if (m.schema == LabelSchema::mrnet3) {
            c.labels = e.labels;
        } else {
            c.ternary = e.ternary;
            c.labels = {e.binary_label(), 0, 0};
        }
        clips.push_back(std::move(c));
    }
    return clips;
}

// ---------------------------------------------------------------------------
// Synthetic desk-scale dataset: smooth pseudo-anatomy with one planted,
// localizable motif per label.
//   label 0 (easiest): bright disk in the central region
//   label 1: oriented bright ridge
//   label 2: dark ring near the lower-right quadrant

struct SyntheticSpec {
    int n_clips = 113;
    int frames_min = 8;
    int frames_max = 12;
    int frame_size = 192;
    // MRNet training-split positive proportions: 917/1130, 208/1130, 397/1130
    std::array<Scalar, 3> pos_fraction = {917.0 / 1130.0, 208.0 / 1130.0, 397.0 / 1130.0};
    std::uint64_t seed = 0;
};

namespace detail {

inline void add_gaussian_blob(Tensor& img, Scalar cy, Scalar cx, Scalar radius, Scalar amp) {
    const std::size_t h = img.dim(0), w = img.dim(1);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const Scalar dy = (static_cast<Scalar>(y) - cy) / radius;
            const Scalar dx = (static_cast<Scalar>(x) - cx) / radius;
            img.data()[y * w + x] += amp * std::exp(-(dy * dy + dx * dx));
        }
}

}  // namespace detail

/// Builds one clip for the given label vector. Frames share the clip's
/// pseudo-anatomy (blobs + a ridge) with small per-frame drift; motifs are
/// rendered into every frame so both frame- and clip-level learners see them.
inline ClipVolume synthesize_clip(const std::string& clip_id, Plane plane,
                                  const std::array<int, 3>& labels, const SyntheticSpec& spec,
                                  Rng& rng) {
    const int L = spec.frame_size;
    const int F = static_cast<int>(rng.uniform_int(spec.frames_min, spec.frames_max));
    ClipVolume clip;
    clip.clip_id = clip_id;
    clip.plane = plane;
    clip.labels = labels;
    clip.frames = Tensor({static_cast<std::size_t>(F), static_cast<std::size_t>(L),
                          static_cast<std::size_t>(L)});

    // clip-level anatomy parameters
    const Scalar body_cy = rng.uniform_real(0.40, 0.60) * L;
    const Scalar body_cx = rng.uniform_real(0.40, 0.60) * L;
    const Scalar ridge_angle = rng.uniform_real(0, M_PI);
    const Scalar motif_jitter = rng.uniform_real(-4.0, 4.0);

    for (int t = 0; t < F; ++t) {
        Tensor img({static_cast<std::size_t>(L), static_cast<std::size_t>(L)});
        const Scalar drift = 2.0 * std::sin(2 * M_PI * t / std::max(F, 1));
        // smooth body + a faint anatomical ridge
        detail::add_gaussian_blob(img, body_cy + drift, body_cx, 0.35 * L, 0.45);
        detail::add_gaussian_blob(img, body_cy - 0.2 * L, body_cx + 0.15 * L + drift, 0.18 * L,
                                  0.25);
        for (int s = -L / 3; s <= L / 3; ++s) {
            const int y = static_cast<int>(body_cy + s * std::sin(ridge_angle));
            const int x = static_cast<int>(body_cx + s * std::cos(ridge_angle));
            if (y >= 1 && y < L - 1 && x >= 1 && x < L - 1)
                for (int d = -1; d <= 1; ++d) img.data()[(y + d) * L + x] += 0.12;
        }

        if (labels[0]) {
            // easiest motif: strong bright disk
            detail::add_gaussian_blob(img, 0.3 * L + motif_jitter, 0.3 * L + motif_jitter,
                                      0.08 * L, 0.9);
        }
        if (labels[1]) {
            // oriented bright ridge, fixed diagonal
            for (int s = 0; s < L / 2; ++s) {
                const int y = L / 4 + s / 2;
                const int x = L / 2 + s / 2;
                if (y < L - 1 && x < L - 1)
                    for (int d = 0; d <= 1; ++d) img.data()[(y + d) * L + x] += 0.55;
            }
        }
        if (labels[2]) {
            // ring motif in the lower-right quadrant
            const Scalar rcy = 0.7 * L + motif_jitter, rcx = 0.7 * L;
            for (std::size_t y = 0; y < static_cast<std::size_t>(L); ++y)
                for (std::size_t x = 0; x < static_cast<std::size_t>(L); ++x) {
                    const Scalar r = std::hypot(static_cast<Scalar>(y) - rcy,
                                                static_cast<Scalar>(x) - rcx);
                    if (std::abs(r - 0.1 * L) < 2.0) img.data()[y * L + x] += 0.6;
                }
        }

        for (std::size_t i = 0; i < img.size(); ++i)
            clip.frames[static_cast<std::size_t>(t) * L * L + i] =
                std::clamp(img[i], Scalar{0}, Scalar{1});
    }
    return clip;
}

inline SkidvolData clip_to_skidvol_u8(const ClipVolume& clip) {
    SkidvolData v;
    v.f = static_cast<std::uint32_t>(clip.frames.dim(0));
    v.h = static_cast<std::uint32_t>(clip.frames.dim(1));
    v.w = static_cast<std::uint32_t>(clip.frames.dim(2));
    v.dtype = VolDtype::u8;
    v.payload.resize(clip.frames.size());
    for (std::size_t i = 0; i < clip.frames.size(); ++i)
        v.payload[i] = static_cast<std::uint8_t>(
            std::lround(std::clamp(clip.frames[i], Scalar{0}, Scalar{1}) * 255.0));
    return v;
}

/// Per-class positive counts from the spec proportions with per-class
/// rounding; label subsets are drawn independently per class, so label
/// concurrence arises naturally.
inline std::vector<std::array<int, 3>> draw_synthetic_labels(const SyntheticSpec& spec, Rng& rng) {
    std::vector<std::array<int, 3>> labels(static_cast<std::size_t>(spec.n_clips),
                                           std::array<int, 3>{0, 0, 0});
    for (std::size_t j = 0; j < 3; ++j) {
        const int n_pos = static_cast<int>(
            std::lround(spec.pos_fraction[j] * static_cast<Scalar>(spec.n_clips)));
        std::vector<std::size_t> idx(labels.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng.engine());
        for (int i = 0; i < n_pos; ++i) labels[idx[static_cast<std::size_t>(i)]][j] = 1;
    }
    return labels;
}

/// Writes a full synthetic split (clips for every requested plane plus the
/// labels CSV) under `root`. Deterministic under spec.seed.
inline void generate_synthetic_dataset(const SyntheticSpec& spec, const std::string& root,
                                       const std::string& split,
                                       const std::vector<Plane>& planes = {Plane::sagittal,
                                                                           Plane::coronal,
                                                                           Plane::axial}) {
    namespace fs = std::filesystem;
    Rng rng(spec.seed);
    const auto labels = draw_synthetic_labels(spec, rng);

    fs::create_directories(root);
    std::ofstream csv(root + "/" + split + "_labels.csv");
    if (!csv) throw std::runtime_error("generate_synthetic_dataset: cannot write labels CSV");
    csv << "clip_id,abnormal,acl,meniscus\n";
    for (int i = 0; i < spec.n_clips; ++i) {
        std::ostringstream id;
        id << split << "_" << std::setw(4) << std::setfill('0') << i;
        csv << id.str() << "," << labels[static_cast<std::size_t>(i)][0] << ","
            << labels[static_cast<std::size_t>(i)][1] << ","
            << labels[static_cast<std::size_t>(i)][2] << "\n";
    }
    csv.close();

    for (Plane plane : planes) {
        fs::create_directories(root + "/" + split + "/" + plane_name(plane));
        // per-plane RNG stream derived from the base seed
        Rng prng(spec.seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(plane) + 1)));
        for (int i = 0; i < spec.n_clips; ++i) {
            std::ostringstream id;
            id << split << "_" << std::setw(4) << std::setfill('0') << i;
            const ClipVolume clip = synthesize_clip(id.str(), plane,
                                                    labels[static_cast<std::size_t>(i)], spec,
                                                    prng);
            save_skidvol(clip_to_skidvol_u8(clip),
                         root + "/" + split + "/" + plane_name(plane) + "/" + id.str() +
                             ".skidvol");
        }
    }
}

// ---------------------------------------------------------------------------
// Import: a directory of per-frame PGM images (P2 or P5, 8/16-bit) becomes
// one SKIDVOL clip. Frames are ordered by filename and bilinearly resized to
// a square target (default 256).

namespace detail {

inline Tensor load_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_pgm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P2" && magic != "P5")
        throw std::runtime_error("load_pgm: " + path + " is not a PGM (P2/P5) file");
    auto next_int = [&]() {
        // skip whitespace and '#' comment lines
        while (true) {
            const int c = in.peek();
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        long v = 0;
        in >> v;
        if (!in) throw std::runtime_error("load_pgm: malformed header in " + path);
        return v;
    };
    const long w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535)
        throw std::runtime_error("load_pgm: bad dimensions in " + path);
    Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    const std::size_t n = img.size();
    if (magic == "P2") {
        for (std::size_t i = 0; i < n; ++i) {
            long v;
            in >> v;
            if (!in) throw std::runtime_error("load_pgm: truncated pixel data in " + path);
            img[i] = static_cast<Scalar>(v) / static_cast<Scalar>(maxval);
        }
    } else {
        in.get();  // single whitespace after maxval
        const int bytes = maxval > 255 ? 2 : 1;
        std::vector<unsigned char> buf(n * static_cast<std::size_t>(bytes));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!in) throw std::runtime_error("load_pgm: truncated pixel data in " + path);
        for (std::size_t i = 0; i < n; ++i) {
            const long v = bytes == 1 ? buf[i] : (buf[2 * i] << 8 | buf[2 * i + 1]);
            img[i] = static_cast<Scalar>(v) / static_cast<Scalar>(maxval);
        }
    }
    return img;
}

inline Tensor resize_bilinear(const Tensor& src, std::size_t out_h, std::size_t out_w) {
    Tensor dst({out_h, out_w});
    const Scalar sy = static_cast<Scalar>(src.dim(0)) / static_cast<Scalar>(out_h);
    const Scalar sx = static_cast<Scalar>(src.dim(1)) / static_cast<Scalar>(out_w);
    for (std::size_t y = 0; y < out_h; ++y)
        for (std::size_t x = 0; x < out_w; ++x) {
            const Scalar fy = std::clamp((static_cast<Scalar>(y) + 0.5) * sy - 0.5, Scalar(0),
                                         static_cast<Scalar>(src.dim(0) - 1));
            const Scalar fx = std::clamp((static_cast<Scalar>(x) + 0.5) * sx - 0.5, Scalar(0),
                                         static_cast<Scalar>(src.dim(1) - 1));
            dst.at(y, x) = imgops::sample_bilinear(src, fy, fx);
        }
    return dst;
}

}  // namespace detail

inline void import_pgm_directory(const std::string& dir, const std::string& out_path,
                                 int target_size = 256) {
    namespace fs = std::filesystem;
    if (target_size < 1) throw std::invalid_argument("import: target size must be >= 1");
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".pgm")
            files.push_back(e.path().string());
    if (files.empty()) throw std::runtime_error("import: no .pgm files in " + dir);
    std::sort(files.begin(), files.end());

    const auto side = static_cast<std::size_t>(target_size);
    SkidvolData v;
    v.f = static_cast<std::uint32_t>(files.size());
    v.h = static_cast<std::uint32_t>(side);
    v.w = static_cast<std::uint32_t>(side);
    v.dtype = VolDtype::f32;
    v.payload.resize(files.size() * side * side * 4);
    for (std::size_t t = 0; t < files.size(); ++t) {
        const Tensor img = detail::resize_bilinear(detail::load_pgm(files[t]), side, side);
        for (std::size_t i = 0; i < img.size(); ++i) {
            const auto x = static_cast<float>(img[i]);
            std::memcpy(v.payload.data() + (t * side * side + i) * 4, &x, 4);
        }
    }
    save_skidvol(v, out_path);
}

// ---------------------------------------------------------------------------
// Ablation plumbing

/// Uniform clip-level subsample of round(fraction * n) entries, adjusted so
/// every class keeps at least one positive. Deterministic under seed.
inline DatasetManifest subset_for_label_efficiency(const DatasetManifest& manifest,
                                                   Scalar fraction, std::uint64_t seed) {
    if (fraction <= 0 || fraction > 1)
        throw std::invalid_argument("subset_for_label_efficiency: fraction must be in (0,1]");
    if (fraction == 1.0) return manifest;
    const std::size_t n = manifest.entries.size();
    const std::size_t n_sub = static_cast<std::size_t>(
        std::lround(fraction * static_cast<Scalar>(n)));
    if (n_sub == 0)
        throw std::invalid_argument("subset_for_label_efficiency: fraction too small (no clips)");

    Rng rng(seed);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    std::vector<std::size_t> chosen(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_sub));

    auto positive = [&](std::size_t e, std::size_t j) {
        return manifest.schema == LabelSchema::mrnet3
                   ? manifest.entries[e].labels[j] == 1
                   : manifest.entries[e].binary_label() == 1;
    };
    const std::size_t n_classes = manifest.schema == LabelSchema::mrnet3 ? 3 : 1;
    for (std::size_t j = 0; j < n_classes; ++j) {
        if (std::any_of(chosen.begin(), chosen.end(),
                        [&](std::size_t e) { return positive(e, j); }))
            continue;
        // swap in the first unchosen positive for this class
        auto donor = std::find_if(idx.begin() + static_cast<std::ptrdiff_t>(n_sub), idx.end(),
                                  [&](std::size_t e) { return positive(e, j); });
        if (donor == idx.end())
            throw std::runtime_error(
                "subset_for_label_efficiency: class " + std::to_string(j) +
                " has no positives at all; increase the fraction or fix the split");
        // replace a chosen clip that is not the sole representative elsewhere
        bool swapped = false;
        for (auto& c : chosen) {
            bool sole = false;
            for (std::size_t q = 0; q < n_classes && !sole; ++q) {
                if (!positive(c, q)) continue;
                const auto reps = std::count_if(chosen.begin(), chosen.end(),
                                                [&](std::size_t e) { return positive(e, q); });
                sole = reps <= 1;
            }
            if (!sole) {
                c = *donor;
                swapped = true;
                break;
            }
        }
        if (!swapped)
            throw std::runtime_error(
                "subset_for_label_efficiency: cannot keep every class represented at fraction " +
                std::to_string(fraction) + "; increase the fraction");
    }

    std::sort(chosen.begin(), chosen.end());
    DatasetManifest out = manifest;
    out.entries.clear();
    for (std::size_t e : chosen) out.entries.push_back(manifest.entries[e]);
    return out;
}

/// Duplicates minority-class entries (by reference) until class counts match
/// within one. Binary schema only.
inline DatasetManifest oversample_minority(const DatasetManifest& manifest) {
    if (manifest.schema != LabelSchema::kneemri_binary)
        throw std::invalid_argument("oversample_minority: binary schema required");
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
        (manifest.entries[i].binary_label() ? pos : neg).push_back(i);
    if (pos.empty() || neg.empty())
        throw std::invalid_argument("oversample_minority: need both classes present");
    DatasetManifest out = manifest;
    const auto& minority = pos.size() < neg.size() ? pos : neg;
    const std::size_t deficit =
        (pos.size() < neg.size() ? neg.size() - pos.size() : pos.size() - neg.size());
    for (std::size_t i = 0; i < deficit; ++i)
        out.entries.push_back(manifest.entries[minority[i % minority.size()]]);
    return out;
}

// ---------------------------------------------------------------------------
// Canonical encoder input for downstream/geo tasks: identity-order,
// center-cropped 64x64 patch per partition cell.

inline Tensor frame_to_patches(const Frame& f, int n_patches = 9) {
    const std::vector<Tensor> parts = partition_frame(f, n_patches);
    Tensor out({static_cast<std::size_t>(n_patches), static_cast<std::size_t>(kPatchOut),
                static_cast<std::size_t>(kPatchOut)});
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const int c = center_crop_origin(static_cast<int>(parts[i].dim(0)));
        const Tensor p = crop64_at(parts[i], c, c);
        std::copy(p.data(), p.data() + p.size(), out.data() + i * p.size());
    }
    return out;
}

/// Stacks the selected frames of a clip into an encoder batch (T,9,64,64).
inline Tensor clip_to_patch_stack(const ClipVolume& clip, const std::vector<int>& frame_indices,
                                  int n_patches = 9) {
    Tensor out({frame_indices.size(), static_cast<std::size_t>(n_patches),
                static_cast<std::size_t>(kPatchOut), static_cast<std::size_t>(kPatchOut)});
    const std::size_t fsz = static_cast<std::size_t>(n_patches) * kPatchOut * kPatchOut;
    for (std::size_t t = 0; t < frame_indices.size(); ++t) {
        const Tensor p = frame_to_patches(clip.frame(static_cast<std::size_t>(frame_indices[t])),
                                          n_patches);
        std::copy(p.data(), p.data() + fsz, out.data() + t * fsz);
    }
    return out;
}

}  // namespace skid
