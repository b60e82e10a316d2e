#ifndef SETVEC_DATA_HPP_
#define SETVEC_DATA_HPP_

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "setvec/rng.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

static_assert(std::endian::native == std::endian::little, "blob format assumes little-endian host");

// ---------------------------------------------------------------------------
// core dataset types
// ---------------------------------------------------------------------------

// One subject: a set of patches plus the bag-level target. relevance and
// coordinates are optional; when present they have one entry per patch.
template <typename S = double>
struct BagT {
    std::vector<TensorT<S>> patches;
    S y{0};
    std::vector<std::uint8_t> relevance;
    std::vector<std::array<std::int64_t, 3>> coordinates;
    std::string subject_id;

    std::size_t size() const { return patches.size(); }
};

using Bag = BagT<double>;

template <typename S = double>
struct DigitDatasetT {
    TensorT<S> images;        // [n,28,28], pixel range [0,1]
    std::vector<int> labels;  // 0..9

    std::size_t size() const { return labels.size(); }
};

using DigitDataset = DigitDatasetT<double>;

inline int prime_value(int digit) {
    return (digit == 2 || digit == 3 || digit == 5 || digit == 7) ? digit : 0;
}

// ---------------------------------------------------------------------------
// IDX container (big-endian magic + dims + raw ubyte payload)
// ---------------------------------------------------------------------------

namespace idx {

constexpr std::uint32_t kImagesMagic = 0x00000803;  // ubyte, 3 dims
constexpr std::uint32_t kLabelsMagic = 0x00000801;  // ubyte, 1 dim

inline std::uint32_t read_be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

inline void append_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(std::uint8_t(v >> 24));
    out.push_back(std::uint8_t(v >> 16));
    out.push_back(std::uint8_t(v >> 8));
    out.push_back(std::uint8_t(v));
}

}  // namespace idx

template <typename S = double>
TensorT<S> parse_idx_images(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4) throw format_error("idx: stream too short for magic");
    const std::uint32_t magic = idx::read_be32(bytes.data());
    if (magic != idx::kImagesMagic)
        throw format_error("idx: bad image magic 0x" + [&] {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%08x", magic);
            return std::string(buf);
        }());
    if (bytes.size() < 16) throw format_error("idx: truncated image header");
    const std::size_t n = idx::read_be32(bytes.data() + 4);
    const std::size_t h = idx::read_be32(bytes.data() + 8);
    const std::size_t w = idx::read_be32(bytes.data() + 12);
    const std::size_t want = 16 + n * h * w;
    if (bytes.size() != want)
        throw format_error("idx: payload size mismatch: expected " + std::to_string(want) +
                           " bytes, got " + std::to_string(bytes.size()));
    TensorT<S> images({n, h, w});
    for (std::size_t i = 0; i < n * h * w; ++i)
        images[i] = static_cast<S>(bytes[16 + i]) / S{255};
    return images;
}

inline std::vector<int> parse_idx_labels(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4) throw format_error("idx: stream too short for magic");
    const std::uint32_t magic = idx::read_be32(bytes.data());
    if (magic != idx::kLabelsMagic) throw format_error("idx: bad label magic");
    if (bytes.size() < 8) throw format_error("idx: truncated label header");
    const std::size_t n = idx::read_be32(bytes.data() + 4);
    if (bytes.size() != 8 + n)
        throw format_error("idx: payload size mismatch: expected " + std::to_string(8 + n) +
                           " bytes, got " + std::to_string(bytes.size()));
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = bytes[8 + i];
    return labels;
}

template <typename S>
std::vector<std::uint8_t> write_idx_images(const TensorT<S>& images) {
    if (images.rank() != 3)
        throw dim_error("write_idx_images: want [n,h,w], got " + shape_str(images.shape()));
    std::vector<std::uint8_t> out;
    out.reserve(16 + images.size());
    idx::append_be32(out, idx::kImagesMagic);
    idx::append_be32(out, std::uint32_t(images.extent(0)));
    idx::append_be32(out, std::uint32_t(images.extent(1)));
    idx::append_be32(out, std::uint32_t(images.extent(2)));
    for (std::size_t i = 0; i < images.size(); ++i) {
        const double v = std::lround(static_cast<double>(images[i]) * 255.0);
        out.push_back(std::uint8_t(std::min(255.0, std::max(0.0, v))));
    }
    return out;
}

inline std::vector<std::uint8_t> write_idx_labels(const std::vector<int>& labels) {
    std::vector<std::uint8_t> out;
    out.reserve(8 + labels.size());
    idx::append_be32(out, idx::kLabelsMagic);
    idx::append_be32(out, std::uint32_t(labels.size()));
    for (int v : labels) out.push_back(std::uint8_t(v));
    return out;
}

// ---------------------------------------------------------------------------
// synthetic digit source
// ---------------------------------------------------------------------------
// Seven-segment style glyphs with per-instance jitter and noise. Stands in
// for a real handwritten-digit corpus when none is on disk; the IDX path
// above loads the real thing when available.

namespace digits {

inline const char* segments(int digit) {
    static const char* kSegs[10] = {"abcdef", "bc",     "abged", "abgcd", "fgbc",
                                    "afgcd",  "afgedc", "abc",   "abcdefg", "abcfgd"};
    return kSegs[digit];
}

// 28x28 canvas; body box at (3,7) size 22x14, stroke 3, soft edges.
template <typename S = double>
TensorT<S> glyph(int digit) {
    const int x0 = 7, y0 = 3, w = 14, h = 22, t = 3;
    const int mid = y0 + h / 2;
    auto box = [&](char s, int& by, int& bx, int& bh, int& bw) {
        switch (s) {
            case 'a': by = y0; bx = x0; bh = t; bw = w; break;
            case 'g': by = mid - t / 2; bx = x0; bh = t; bw = w; break;
            case 'd': by = y0 + h - t; bx = x0; bh = t; bw = w; break;
            case 'f': by = y0; bx = x0; bh = h / 2; bw = t; break;
            case 'b': by = y0; bx = x0 + w - t; bh = h / 2; bw = t; break;
            case 'e': by = mid; bx = x0; bh = h - h / 2; bw = t; break;
            default:  by = mid; bx = x0 + w - t; bh = h - h / 2; bw = t; break;  // 'c'
        }
    };
    TensorT<S> img({28, 28});
    for (const char* s = segments(digit); *s; ++s) {
        int by, bx, bh, bw;
        box(*s, by, bx, bh, bw);
        for (int y = by; y < by + bh; ++y)
            for (int x = bx; x < bx + bw; ++x) img(y, x) = S{1};
    }
    // one 3x3 box blur pass to soften stroke edges
    TensorT<S> soft({28, 28});
    for (int y = 0; y < 28; ++y)
        for (int x = 0; x < 28; ++x) {
            S acc{0};
            int cnt = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < 28 && xx >= 0 && xx < 28) {
                        acc += img(yy, xx);
                        ++cnt;
                    }
                }
            soft(y, x) = acc / static_cast<S>(cnt);
        }
    return soft;
}

}  // namespace digits

template <typename S = double>
DigitDatasetT<S> make_digit_dataset(std::uint64_t seed, std::size_t n_images) {
    Rng rng(Rng::derive(seed, "digit-images"));
    static thread_local std::vector<TensorT<S>> templates;  // lazily built, deterministic
    if (templates.empty())
        for (int d = 0; d < 10; ++d) templates.push_back(digits::glyph<S>(d));

    DigitDatasetT<S> ds;
    ds.images = TensorT<S>({n_images, 28, 28});
    ds.labels.resize(n_images);
    for (std::size_t i = 0; i < n_images; ++i) {
        const int digit = static_cast<int>(rng.index(10));
        ds.labels[i] = digit;
        const int sy = static_cast<int>(rng.index(5)) - 2;  // jitter in [-2,2]
        const int sx = static_cast<int>(rng.index(5)) - 2;
        const TensorT<S>& tpl = templates[digit];
        for (int y = 0; y < 28; ++y)
            for (int x = 0; x < 28; ++x) {
                const int ty = y - sy, tx = x - sx;
                S v = (ty >= 0 && ty < 28 && tx >= 0 && tx < 28) ? tpl(ty, tx) : S{0};
                v += static_cast<S>(0.10 * rng.normal());
                ds.images(i, y, x) = std::min(S{1}, std::max(S{0}, v));
            }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// bag construction (digit task)
// ---------------------------------------------------------------------------

// Bag sizes uniform in [min_size, max_size], instances drawn uniformly with
// replacement; y is the sum of prime digit values (2,3,5,7) over instances,
// duplicates included. relevance marks the prime instances.
template <typename S>
std::vector<BagT<S>> make_bags(const DigitDatasetT<S>& ds, std::uint64_t seed, std::size_t n_bags,
                               std::size_t min_size = 20, std::size_t max_size = 100,
                               const std::string& id_prefix = "bag") {
    if (ds.size() == 0) throw domain_error("make_bags: empty digit dataset");
    if (min_size < 1 || min_size > max_size)
        throw usage_error("make_bags: need 1 <= min_size <= max_size, got [" +
                          std::to_string(min_size) + "," + std::to_string(max_size) + "]");
    Rng rng(Rng::derive(seed, "bags"));
    std::vector<BagT<S>> bags;
    bags.reserve(n_bags);
    for (std::size_t b = 0; b < n_bags; ++b) {
        const std::size_t n = rng.index(min_size, max_size);
        BagT<S> bag;
        char idbuf[64];
        std::snprintf(idbuf, sizeof idbuf, "%s-%06zu", id_prefix.c_str(), b);
        bag.subject_id = idbuf;
        bag.patches.reserve(n);
        bag.relevance.reserve(n);
        double y = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t k = rng.index(ds.size());
            TensorT<S> patch({1, 28, 28});
            std::memcpy(patch.data(), ds.images.data() + k * 28 * 28, 28 * 28 * sizeof(S));
            bag.patches.push_back(std::move(patch));
            const int pv = prime_value(ds.labels[k]);
            bag.relevance.push_back(pv > 0 ? 1 : 0);
            y += pv;
        }
        bag.y = static_cast<S>(y);
        bags.push_back(std::move(bag));
    }
    return bags;
}

// ---------------------------------------------------------------------------
// volumetric patch extraction
// ---------------------------------------------------------------------------

inline std::vector<std::size_t> window_starts(std::size_t dim, std::size_t patch, double overlap) {
    std::size_t stride =
        static_cast<std::size_t>(std::floor(static_cast<double>(patch) * (1.0 - overlap) + 1e-9));
    if (stride < 1) stride = 1;
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + patch <= dim; s += stride) starts.push_back(s);
    // clamp a final window so the last patch ends exactly at the boundary
    if (starts.empty() || starts.back() + patch < dim) starts.push_back(dim - patch);
    return starts;
}

template <typename S>
BagT<S> extract_patches_3d(const TensorT<S>& volume, std::size_t patch = 32, double overlap = 0.4) {
    if (volume.rank() != 3)
        throw dim_error("extract_patches_3d: want volume [D,H,W], got " +
                        shape_str(volume.shape()));
    const std::size_t D = volume.extent(0), H = volume.extent(1), W = volume.extent(2);
    for (std::size_t ext : {D, H, W})
        if (ext < patch)
            throw domain_error("extract_patches_3d: volume extent " + std::to_string(ext) +
                               " smaller than patch " + std::to_string(patch));
    const auto zs = window_starts(D, patch, overlap);
    const auto ys = window_starts(H, patch, overlap);
    const auto xs = window_starts(W, patch, overlap);

    BagT<S> bag;
    bag.patches.reserve(zs.size() * ys.size() * xs.size());
    for (std::size_t z0 : zs)
        for (std::size_t y0 : ys)
            for (std::size_t x0 : xs) {
                TensorT<S> p({1, patch, patch, patch});
                for (std::size_t z = 0; z < patch; ++z)
                    for (std::size_t y = 0; y < patch; ++y)
                        std::memcpy(p.data() + (z * patch + y) * patch,
                                    volume.data() + ((z0 + z) * H + (y0 + y)) * W + x0,
                                    patch * sizeof(S));
                bag.patches.push_back(std::move(p));
                bag.coordinates.push_back({std::int64_t(z0), std::int64_t(y0), std::int64_t(x0)});
            }
    return bag;
}

// ---------------------------------------------------------------------------
// synthetic phantom volumes (3-D pipeline stand-in for clinical CT)
// ---------------------------------------------------------------------------

template <typename S = double>
struct PhantomT {
    TensorT<S> volume;                 // [size,size,size]
    S severity{0};                     // lesion voxel fraction
    std::vector<std::uint8_t> lesion_mask;  // one byte per voxel
};

using Phantom = PhantomT<double>;

template <typename S = double>
PhantomT<S> synth_phantom(std::uint64_t seed, std::size_t size = 64, std::size_t n_lesions = 3,
                          double lesion_intensity = 0.5) {
    Rng rng(Rng::derive(seed, "phantom"));
    PhantomT<S> ph;
    ph.volume = TensorT<S>({size, size, size});
    ph.lesion_mask.assign(size * size * size, 0);

    // smooth background: low-frequency bumps over a base level
    const int n_bumps = 24;
    std::vector<std::array<double, 5>> bumps;  // z,y,x,radius,amp
    for (int i = 0; i < n_bumps; ++i)
        bumps.push_back({rng.uniform(0, double(size)), rng.uniform(0, double(size)),
                         rng.uniform(0, double(size)), rng.uniform(size / 8.0, size / 3.0),
                         rng.uniform(-0.08, 0.08)});
    for (std::size_t z = 0; z < size; ++z)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                double v = 0.65;
                for (const auto& bmp : bumps) {
                    const double dz = double(z) - bmp[0], dy = double(y) - bmp[1],
                                 dx = double(x) - bmp[2];
                    const double r2 = (dz * dz + dy * dy + dx * dx) / (bmp[3] * bmp[3]);
                    if (r2 < 4.0) v += bmp[4] * std::exp(-r2);
                }
                ph.volume(z, y, x) = static_cast<S>(v);
            }

    // dark spherical lesions; severity is the union volume fraction
    std::size_t marked = 0;
    for (std::size_t l = 0; l < n_lesions; ++l) {
        const double r = rng.uniform(4.0, 8.0);
        const double cz = rng.uniform(r, double(size) - r);
        const double cy = rng.uniform(r, double(size) - r);
        const double cx = rng.uniform(r, double(size) - r);
        const std::size_t z_lo = std::size_t(std::max(0.0, cz - r)),
                          z_hi = std::size_t(std::min(double(size) - 1, cz + r));
        for (std::size_t z = z_lo; z <= z_hi; ++z)
            for (std::size_t y = std::size_t(std::max(0.0, cy - r));
                 y <= std::size_t(std::min(double(size) - 1, cy + r)); ++y)
                for (std::size_t x = std::size_t(std::max(0.0, cx - r));
                     x <= std::size_t(std::min(double(size) - 1, cx + r)); ++x) {
                    const double dz = double(z) - cz, dy = double(y) - cy, dx = double(x) - cx;
                    if (dz * dz + dy * dy + dx * dx <= r * r) {
                        const std::size_t off = (z * size + y) * size + x;
                        ph.volume[off] *= static_cast<S>(1.0 - lesion_intensity);
                        if (!ph.lesion_mask[off]) {
                            ph.lesion_mask[off] = 1;
                            ++marked;
                        }
                    }
                }
    }
    ph.severity = static_cast<S>(double(marked) / double(size * size * size));
    for (S& v : ph.volume.values()) v = std::min(S{1}, std::max(S{0}, v));
    return ph;
}

// Phantom bag: patches from the sliding window, y = severity, relevance marks
// patches overlapping the lesion mask by at least min_lesion_frac of their
// voxels.
template <typename S = double>
BagT<S> make_phantom_bag(std::uint64_t seed, const std::string& subject_id, std::size_t size,
                         std::size_t max_lesions, double lesion_intensity, std::size_t patch = 32,
                         double overlap = 0.4, double min_lesion_frac = 0.0) {
    Rng rng(Rng::derive(seed, "phantom-count"));
    const std::size_t n_lesions = rng.index(max_lesions + 1);
    PhantomT<S> ph = synth_phantom<S>(seed, size, n_lesions, lesion_intensity);
    BagT<S> bag = extract_patches_3d(ph.volume, patch, overlap);
    bag.subject_id = subject_id;
    bag.y = ph.severity;
    bag.relevance.reserve(bag.size());
    const double min_voxels = min_lesion_frac * double(patch * patch * patch);
    for (const auto& c : bag.coordinates) {
        std::size_t hit = 0;
        for (std::size_t z = 0; z < patch; ++z)
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    hit += ph.lesion_mask[((c[0] + z) * size + (c[1] + y)) * size + (c[2] + x)];
        bag.relevance.push_back(double(hit) > min_voxels ? 1 : 0);
    }
    return bag;
}

// ---------------------------------------------------------------------------
// bag dataset persistence: manifest.json + one raw blob per bag
// ---------------------------------------------------------------------------

namespace blob {

constexpr char kMagic[4] = {'S', 'V', 'B', 'G'};

template <typename S>
void write_bag(const std::filesystem::path& path, const BagT<S>& bag) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("cannot open for write: " + path.string());
    os.write(kMagic, 4);
    const std::uint32_t version = 1, n = std::uint32_t(bag.size()),
                        rank = std::uint32_t(bag.patches.empty() ? 0 : bag.patches[0].rank());
    os.write(reinterpret_cast<const char*>(&version), 4);
    os.write(reinterpret_cast<const char*>(&n), 4);
    os.write(reinterpret_cast<const char*>(&rank), 4);
    for (std::size_t a = 0; a < rank; ++a) {
        const std::uint64_t e = bag.patches[0].extent(a);
        os.write(reinterpret_cast<const char*>(&e), 8);
    }
    for (const auto& p : bag.patches) {
        if (p.shape() != bag.patches[0].shape())
            throw dim_error("write_bag: patches must share one shape");
        std::vector<double> buf(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) buf[i] = static_cast<double>(p[i]);
        os.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 8));
    }
    if (!os) throw format_error("short write: " + path.string());
}

template <typename S>
std::vector<TensorT<S>> read_bag(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("cannot open: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw format_error("bad bag blob magic: " + path.string());
    std::uint32_t version = 0, n = 0, rank = 0;
    is.read(reinterpret_cast<char*>(&version), 4);
    is.read(reinterpret_cast<char*>(&n), 4);
    is.read(reinterpret_cast<char*>(&rank), 4);
    if (!is || version != 1) throw format_error("unsupported bag blob version");
    Shape shape(rank);
    for (auto& e : shape) {
        std::uint64_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 8);
        e = std::size_t(v);
    }
    const std::size_t vol = shape_volume(shape);
    std::vector<TensorT<S>> patches;
    patches.reserve(n);
    std::vector<double> buf(vol);
    for (std::uint32_t j = 0; j < n; ++j) {
        is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(vol * 8));
        if (!is) throw format_error("truncated bag blob: " + path.string());
        TensorT<S> p(shape);
        for (std::size_t i = 0; i < vol; ++i) p[i] = static_cast<S>(buf[i]);
        patches.push_back(std::move(p));
    }
    return patches;
}

}  // namespace blob

template <typename S>
void save_bag_dataset(const std::filesystem::path& dir, const std::vector<BagT<S>>& bags,
                      const std::string& task) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "bags");
    nlohmann::json manifest;
    manifest["format"] = "setvec-bags-v1";
    manifest["task"] = task;
    manifest["n_bags"] = bags.size();
    auto& list = manifest["bags"] = nlohmann::json::array();
    for (std::size_t b = 0; b < bags.size(); ++b) {
        char name[32];
        std::snprintf(name, sizeof name, "bags/bag_%06zu.bin", b);
        blob::write_bag(dir / name, bags[b]);
        nlohmann::json e;
        e["subject_id"] = bags[b].subject_id;
        e["y"] = static_cast<double>(bags[b].y);
        e["n_patches"] = bags[b].size();
        e["file"] = name;
        if (!bags[b].relevance.empty()) e["relevance"] = bags[b].relevance;
        if (!bags[b].coordinates.empty()) {
            auto& cs = e["coordinates"] = nlohmann::json::array();
            for (const auto& c : bags[b].coordinates) cs.push_back({c[0], c[1], c[2]});
        }
        list.push_back(std::move(e));
    }
    std::ofstream os(dir / "manifest.json");
    os << manifest.dump(1) << '\n';
    if (!os) throw format_error("cannot write manifest under " + dir.string());
}

template <typename S = double>
std::vector<BagT<S>> load_bag_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is)
        throw format_error("no manifest.json under " + dir.string() +
                           " (run gen-data first, or point data.dir at a dataset)");
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw format_error("manifest parse failure: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != "setvec-bags-v1")
        throw format_error("unsupported dataset format in " + dir.string());
    std::vector<BagT<S>> bags;
    for (const auto& e : manifest.at("bags")) {
        BagT<S> bag;
        bag.subject_id = e.at("subject_id").get<std::string>();
        bag.y = static_cast<S>(e.at("y").get<double>());
        bag.patches = blob::read_bag<S>(dir / e.at("file").get<std::string>());
        if (e.contains("relevance")) bag.relevance = e["relevance"].get<std::vector<std::uint8_t>>();
        if (e.contains("coordinates"))
            for (const auto& c : e["coordinates"])
                bag.coordinates.push_back({c[0].get<std::int64_t>(), c[1].get<std::int64_t>(),
                                           c[2].get<std::int64_t>()});
        if (bag.patches.size() != e.at("n_patches").get<std::size_t>())
            throw format_error("bag " + bag.subject_id + ": patch count disagrees with manifest");
        bags.push_back(std::move(bag));
    }
    return bags;
}

}  // namespace setvec

#endif  // SETVEC_DATA_HPP_
