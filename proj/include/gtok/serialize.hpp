#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "gtok/motion.hpp"
#include "gtok/optim.hpp"
#include "gtok/rng.hpp"
#include "gtok/tensor.hpp"

namespace gtok {

/// Error taxonomy mapped to CLI exit codes.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& m) : std::runtime_error(m) {}
};
struct MissingPrereq : std::runtime_error {
    explicit MissingPrereq(const std::string& m) : std::runtime_error(m) {}
};
struct IncompatibleCheckpoint : std::runtime_error {
    explicit IncompatibleCheckpoint(const std::string& m) : std::runtime_error(m) {}
};
struct InsufficientData : std::runtime_error {
    explicit InsufficientData(const std::string& m) : std::runtime_error(m) {}
};

namespace bin {

inline void put_u16(std::string& b, std::uint16_t v) {
    b.push_back(static_cast<char>(v & 0xff));
    b.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void put_u64(std::string& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
}

inline void put_f32(std::string& b, float v) {
    std::uint32_t u;
    static_assert(sizeof(u) == sizeof(v));
    __builtin_memcpy(&u, &v, 4);
    put_u32(b, u);
}

inline void put_i32(std::string& b, std::int32_t v) { put_u32(b, static_cast<std::uint32_t>(v)); }

/// Cursor over an in-memory file image; every read is bounds checked.
struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) {
            throw IoError("truncated file (wanted " + std::to_string(n) + " bytes at offset " + std::to_string(pos) +
                          " of " + std::to_string(buf.size()) + ")");
        }
    }
    std::uint16_t u16() {
        need(2);
        const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
        pos += 2;
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
    std::uint32_t u32() {
        need(4);
        const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
        pos += 4;
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }
    std::uint64_t u64() {
        const std::uint64_t lo = u32();
        const std::uint64_t hi = u32();
        return lo | (hi << 32);
    }
    float f32() {
        const std::uint32_t u = u32();
        float v;
        __builtin_memcpy(&v, &u, 4);
        return v;
    }
    std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace bin

/// Writes bytes to path atomically: temp file in the same directory, fsync'd
/// stream, then rename.
inline void atomic_write(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw IoError("cannot open for writing: " + tmp);
        }
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        f.flush();
        if (!f) {
            throw IoError("write failed: " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw IoError("rename failed: " + tmp + " -> " + path + " (" + ec.message() + ")");
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open: " + path);
    }
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

// ---------------------------------------------------------------- GTKM ----
// Motion file: magic GTKM, version, fps, joint layout, pose frames, then
// optional AUDI / TEXT chunks.

inline std::string encode_motion(const MotionSequence& seq) {
    validate_sequence(seq);
    std::string b;
    b += "GTKM";
    bin::put_u16(b, 1);
    bin::put_u16(b, static_cast<std::uint16_t>(seq.fps));
    bin::put_u16(b, static_cast<std::uint16_t>(skel::kJoints));
    bin::put_u16(b, static_cast<std::uint16_t>(skel::kRotDims));
    bin::put_u32(b, static_cast<std::uint32_t>(seq.frames));
    for (float v : seq.pose) {
        bin::put_f32(b, v);
    }
    if (seq.has_audio()) {
        b += "AUDI";
        bin::put_u64(b, 4 + 4 * seq.audio.size());
        bin::put_u32(b, static_cast<std::uint32_t>(kAudioRate));
        for (float v : seq.audio) {
            bin::put_f32(b, v);
        }
    }
    if (seq.has_text()) {
        b += "TEXT";
        bin::put_u64(b, 4 * seq.text.size());
        for (std::int32_t v : seq.text) {
            bin::put_i32(b, v);
        }
    }
    return b;
}

inline MotionSequence decode_motion(const std::string& bytes) {
    bin::Reader r{bytes};
    if (r.bytes(4) != "GTKM") {
        throw IoError("not a motion file (bad magic)");
    }
    const std::uint16_t version = r.u16();
    if (version != 1) {
        throw IoError("unsupported motion file version " + std::to_string(version));
    }
    MotionSequence seq;
    seq.fps = r.u16();
    const std::uint16_t joints = r.u16();
    const std::uint16_t rot = r.u16();
    if (joints != skel::kJoints || rot != skel::kRotDims) {
        throw IoError("unexpected joint layout " + std::to_string(joints) + "x" + std::to_string(rot));
    }
    seq.frames = r.u32();
    if (seq.frames < 1) {
        throw IoError("motion file with zero frames");
    }
    seq.pose.resize(static_cast<std::size_t>(seq.frames * skel::kPoseDims));
    for (float& v : seq.pose) {
        v = r.f32();
    }
    while (r.pos < bytes.size()) {
        const std::string tag = r.bytes(4);
        const std::uint64_t len = r.u64();
        if (tag == "AUDI") {
            if (len < 4 || (len - 4) % 4 != 0) {
                throw IoError("bad AUDI chunk size");
            }
            const std::uint32_t rate = r.u32();
            if (rate != kAudioRate) {
                throw IoError("unexpected audio rate " + std::to_string(rate));
            }
            seq.audio.resize((len - 4) / 4);
            for (float& v : seq.audio) {
                v = r.f32();
            }
        } else if (tag == "TEXT") {
            if (len % 4 != 0) {
                throw IoError("bad TEXT chunk size");
            }
            seq.text.resize(len / 4);
            for (std::int32_t& v : seq.text) {
                v = r.i32();
            }
        } else {
            throw IoError("unknown chunk '" + tag + "'");
        }
    }
    try {
        validate_sequence(seq);
    } catch (const std::invalid_argument& e) {
        throw IoError(std::string("inconsistent motion file: ") + e.what());
    }
    return seq;
}

inline void save_motion(const std::string& path, const MotionSequence& seq) { atomic_write(path, encode_motion(seq)); }

inline MotionSequence load_motion(const std::string& path) { return decode_motion(read_file(path)); }

// ---------------------------------------------------------------- GTKC ----
// Checkpoint: magic GTKC, component kind, the resolved config echo, named
// f32 blobs, and a content digest. Save/load round trips bit for bit.

enum class CkptKind : std::uint16_t { vae = 1, prior = 2, feat = 3 };

struct NamedBlob {
    std::string name;
    Tensor<float> data;
};

struct Checkpoint {
    CkptKind kind = CkptKind::vae;
    std::string config_text;
    std::vector<NamedBlob> blobs;

    const NamedBlob* find(const std::string& name) const {
        for (const NamedBlob& b : blobs) {
            if (b.name == name) {
                return &b;
            }
        }
        return nullptr;
    }
};

inline std::string encode_checkpoint(const Checkpoint& c) {
    std::string b;
    b += "GTKC";
    bin::put_u16(b, 1);
    bin::put_u16(b, static_cast<std::uint16_t>(c.kind));
    bin::put_u64(b, c.config_text.size());
    b += c.config_text;
    bin::put_u32(b, static_cast<std::uint32_t>(c.blobs.size()));
    for (const NamedBlob& blob : c.blobs) {
        bin::put_u32(b, static_cast<std::uint32_t>(blob.name.size()));
        b += blob.name;
        bin::put_u32(b, static_cast<std::uint32_t>(blob.data.rank()));
        for (std::int64_t i = 0; i < blob.data.rank(); ++i) {
            bin::put_u64(b, static_cast<std::uint64_t>(blob.data.dim(i)));
        }
        for (std::int64_t i = 0; i < blob.data.numel(); ++i) {
            bin::put_f32(b, blob.data[i]);
        }
    }
    bin::put_u64(b, fnv1a64(b.data(), b.size()));
    return b;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < 8 + 8) {
        throw IoError("checkpoint too small");
    }
    {
        bin::Reader tail{bytes};
        tail.pos = bytes.size() - 8;
        const std::uint64_t stored = tail.u64();
        const std::uint64_t actual = fnv1a64(bytes.data(), bytes.size() - 8);
        if (stored != actual) {
            throw IoError("checkpoint digest mismatch (corrupt file)");
        }
    }
    bin::Reader r{bytes};
    if (r.bytes(4) != "GTKC") {
        throw IoError("not a checkpoint (bad magic)");
    }
    const std::uint16_t version = r.u16();
    if (version != 1) {
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint c;
    const std::uint16_t kind = r.u16();
    if (kind < 1 || kind > 3) {
        throw IoError("unknown checkpoint kind " + std::to_string(kind));
    }
    c.kind = static_cast<CkptKind>(kind);
    const std::uint64_t cfglen = r.u64();
    c.config_text = r.bytes(cfglen);
    const std::uint32_t nblobs = r.u32();
    c.blobs.reserve(nblobs);
    for (std::uint32_t i = 0; i < nblobs; ++i) {
        NamedBlob blob;
        blob.name = r.bytes(r.u32());
        const std::uint32_t rank = r.u32();
        if (rank > 8) {
            throw IoError("blob rank out of range");
        }
        Shape shape(rank);
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<std::int64_t>(r.u64());
        }
        std::int64_t numel = 1;
        for (std::int64_t e : shape) {
            if (e < 1 || numel > (1ll << 33) / std::max<std::int64_t>(e, 1)) {
                throw IoError("blob extent out of range");
            }
            numel *= e;
        }
        std::vector<float> data(static_cast<std::size_t>(numel));
        for (float& v : data) {
            v = r.f32();
        }
        blob.data = Tensor<float>::from(std::move(data), std::move(shape));
        c.blobs.push_back(std::move(blob));
    }
    if (r.pos != bytes.size() - 8) {
        throw IoError("trailing bytes in checkpoint");
    }
    return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) { atomic_write(path, encode_checkpoint(c)); }

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

/// Parameter set <-> blob list. Blobs are always f32 on disk. Restore is
/// strict: a missing blob or a shape mismatch means the checkpoint belongs
/// to a different architecture.
template <typename T>
inline void append_params(Checkpoint& c, const ParameterSet<T>& ps, const std::string& prefix = "") {
    for (std::size_t i = 0; i < ps.size(); ++i) {
        c.blobs.push_back(
            NamedBlob{prefix + ps.name(static_cast<int>(i)), ps.value(static_cast<int>(i)).template cast<float>()});
    }
}

template <typename T>
inline void restore_params(const Checkpoint& c, ParameterSet<T>& ps, const std::string& prefix = "") {
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const std::string name = prefix + ps.name(static_cast<int>(i));
        const NamedBlob* blob = c.find(name);
        if (!blob) {
            throw IncompatibleCheckpoint("checkpoint is missing parameter '" + name + "'");
        }
        if (blob->data.shape() != ps.value(static_cast<int>(i)).shape()) {
            throw IncompatibleCheckpoint("parameter '" + name + "' has shape " +
                                         detail::shape_str(blob->data.shape()) + ", model wants " +
                                         detail::shape_str(ps.value(static_cast<int>(i)).shape()));
        }
        ps.value(static_cast<int>(i)) = blob->data.template cast<T>();
    }
}

}  // namespace gtok
