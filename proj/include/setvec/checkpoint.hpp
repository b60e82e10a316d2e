#ifndef SETVEC_CHECKPOINT_HPP_
#define SETVEC_CHECKPOINT_HPP_

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "setvec/model.hpp"
#include "setvec/tensor.hpp"

namespace setvec {

// ---------------------------------------------------------------------------
// crc32 (IEEE 802.3 polynomial), used to reject corrupt checkpoints
// ---------------------------------------------------------------------------

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len,
                           std::uint32_t crc = 0xffffffffu) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc;
}

inline std::uint32_t crc32_final(std::uint32_t crc) { return crc ^ 0xffffffffu; }

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// checkpoint container
// ---------------------------------------------------------------------------
// Self-describing binary: magic, version, config hash, RNG seed, architecture
// descriptor, step count, then named tensors (dtype tag, shape, payload), and
// a trailing crc32 over everything after the magic. Round-trips bit-exactly.

namespace ckpt {

constexpr char kMagic[4] = {'S', 'V', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
    std::vector<std::uint8_t> buf;

    void raw(const void* p, std::size_t len) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf.insert(buf.end(), b, b + len);
    }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(std::uint32_t(s.size()));
        raw(s.data(), s.size());
    }
    template <typename S>
    void tensor(const std::string& name, const TensorT<S>& t) {
        str(name);
        u8(sizeof(S) == 8 ? 8 : 4);
        u32(std::uint32_t(t.rank()));
        for (std::size_t a = 0; a < t.rank(); ++a) u64(t.extent(a));
        raw(t.data(), t.size() * sizeof(S));
    }
};

struct Reader {
    const std::uint8_t* p;
    const std::uint8_t* end;

    void raw(void* out, std::size_t len) {
        if (std::size_t(end - p) < len) throw format_error("checkpoint: truncated");
        std::memcpy(out, p, len);
        p += len;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        raw(&v, 1);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, 8);
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }
    template <typename S>
    std::pair<std::string, TensorT<S>> tensor() {
        std::string name = str();
        const std::uint8_t dtype = u8();
        if (dtype != (sizeof(S) == 8 ? 8 : 4))
            throw incompat_error("checkpoint: tensor '" + name + "' has " +
                                 std::to_string(int(dtype)) + "-byte scalars, expected " +
                                 std::to_string(sizeof(S)));
        const std::uint32_t rank = u32();
        Shape shape(rank);
        for (auto& e : shape) e = std::size_t(u64());
        TensorT<S> t(shape);
        raw(t.data(), t.size() * sizeof(S));
        return {std::move(name), std::move(t)};
    }
};

inline void encode_config(Writer& w, const ModelConfig& cfg) {
    w.u8(cfg.input == InputKind::image2d ? 2 : 3);
    w.u32(std::uint32_t(cfg.d));
    w.u32(std::uint32_t(cfg.L));
    w.u8(cfg.batchnorm ? 1 : 0);
    w.u32(std::uint32_t(cfg.c1));
    w.u32(std::uint32_t(cfg.c2));
}

inline ModelConfig decode_config(Reader& r) {
    ModelConfig cfg;
    cfg.input = r.u8() == 2 ? InputKind::image2d : InputKind::volume3d;
    cfg.d = r.u32();
    cfg.L = r.u32();
    cfg.batchnorm = r.u8() != 0;
    cfg.c1 = r.u32();
    cfg.c2 = r.u32();
    return cfg;
}

}  // namespace ckpt

template <typename S = double>
struct CheckpointT {
    ModelParamsT<S> params;
    // Adam first/second moments as params-shaped containers; step count
    ModelParamsT<S> adam_m, adam_v;
    std::uint64_t adam_t = 0;
    bool has_optimizer = false;
    std::uint64_t config_hash = 0;
    std::uint64_t rng_seed = 0;
};

using Checkpoint = CheckpointT<double>;

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const CheckpointT<S>& ck) {
    ckpt::Writer w;
    w.raw(ckpt::kMagic, 4);
    w.u32(ckpt::kVersion);
    w.u64(ck.config_hash);
    w.u64(ck.rng_seed);
    ckpt::encode_config(w, ck.params.cfg);
    w.u64(ck.adam_t);
    w.u8(ck.has_optimizer ? 1 : 0);

    std::uint32_t count = 0;
    for_each_persistent(const_cast<ModelParamsT<S>&>(ck.params),
                        [&](const char*, TensorT<S>&) { ++count; });
    if (ck.has_optimizer) {
        std::uint32_t trainable = 0;
        for_each_trainable(const_cast<ModelParamsT<S>&>(ck.params),
                           [&](const char*, TensorT<S>&) { ++trainable; });
        count += 2 * trainable;
    }
    w.u32(count);
    for_each_persistent(const_cast<ModelParamsT<S>&>(ck.params),
                        [&](const char* name, TensorT<S>& t) { w.tensor(std::string("p.") + name, t); });
    if (ck.has_optimizer) {
        for_each_trainable(const_cast<ModelParamsT<S>&>(ck.adam_m),
                           [&](const char* name, TensorT<S>& t) { w.tensor(std::string("m.") + name, t); });
        for_each_trainable(const_cast<ModelParamsT<S>&>(ck.adam_v),
                           [&](const char* name, TensorT<S>& t) { w.tensor(std::string("v.") + name, t); });
    }

    const std::uint32_t crc = crc32_final(crc32(w.buf.data() + 4, w.buf.size() - 4));
    w.u32(crc);

    std::ofstream os(path, std::ios::binary);
    if (!os) throw format_error("cannot open for write: " + path.string());
    os.write(reinterpret_cast<const char*>(w.buf.data()), std::streamsize(w.buf.size()));
    if (!os) throw format_error("short write: " + path.string());
}

template <typename S = double>
CheckpointT<S> load_checkpoint(const std::filesystem::path& path,
                               const ModelConfig* expected = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw format_error("cannot open checkpoint: " + path.string());
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), ckpt::kMagic, 4) != 0)
        throw format_error("not a checkpoint file: " + path.string());

    const std::uint32_t stored_crc = [&] {
        std::uint32_t v;
        std::memcpy(&v, buf.data() + buf.size() - 4, 4);
        return v;
    }();
    const std::uint32_t actual_crc = crc32_final(crc32(buf.data() + 4, buf.size() - 8));
    if (stored_crc != actual_crc)
        throw format_error("checkpoint checksum mismatch (corrupt file): " + path.string());

    ckpt::Reader r{buf.data() + 4, buf.data() + buf.size() - 4};
    const std::uint32_t version = r.u32();
    if (version != ckpt::kVersion)
        throw incompat_error("checkpoint version " + std::to_string(version) +
                             " is not supported (want " + std::to_string(ckpt::kVersion) + ")");

    CheckpointT<S> ck;
    ck.config_hash = r.u64();
    ck.rng_seed = r.u64();
    const ModelConfig cfg = ckpt::decode_config(r);
    if (expected && !(cfg == *expected))
        throw incompat_error("checkpoint architecture " + cfg.descriptor() +
                             " does not match configured " + expected->descriptor());
    ck.adam_t = r.u64();
    ck.has_optimizer = r.u8() != 0;

    ck.params = make_model_params<S>(cfg, 0);
    ck.adam_m = zeros_like(ck.params);
    ck.adam_v = zeros_like(ck.params);

    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, t] = r.template tensor<S>();
        bool placed = false;
        auto place = [&](ModelParamsT<S>& dst, const std::string& prefix) {
            for_each_persistent(dst, [&](const char* n, TensorT<S>& slot) {
                if (name == prefix + n) {
                    if (slot.shape() != t.shape())
                        throw incompat_error("checkpoint tensor " + name + " has shape " +
                                             shape_str(t.shape()) + ", expected " +
                                             shape_str(slot.shape()));
                    slot = t;
                    placed = true;
                }
            });
        };
        if (name.rfind("p.", 0) == 0) place(ck.params, "p.");
        else if (name.rfind("m.", 0) == 0) place(ck.adam_m, "m.");
        else if (name.rfind("v.", 0) == 0) place(ck.adam_v, "v.");
        if (!placed) throw format_error("checkpoint holds unknown tensor: " + name);
    }
    return ck;
}

}  // namespace setvec

#endif  // SETVEC_CHECKPOINT_HPP_
