// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

// Named-tensor checkpoints in the safetensors container:
//
//   [u64 LE header length N][N bytes JSON header, space padded][payload]
//
// The header maps tensor name -> {"dtype", "shape", "data_offsets": [begin, end]}
// with offsets relative to the start of the payload, plus an optional
// "__metadata__" object of string -> string. Payload tensors are written in
// lexicographic name order, which is also the iteration order in memory.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <json.hpp>

#include "acm/dtype.hpp"
#include "acm/error.hpp"
#include "acm/hash.hpp"

namespace acm {

using Shape = std::vector<std::int64_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           [](std::size_t acc, std::int64_t d) { return acc * static_cast<std::size_t>(d); });
}

inline std::string shape_to_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

struct TensorMeta {
    std::string name;
    Shape shape;
    DType dtype = DType::F32;
    std::uint64_t byte_offset = 0;  // relative to the payload start; meaningful after load

    std::size_t numel() const { return shape_numel(shape); }
    std::size_t byte_size() const { return numel() * dtype_size(dtype); }
};

/// A named tensor whose payload is either owned or a view into a mapped file.
/// Values are exposed widened to F64; narrowing happens only on construction.
class Tensor {
public:
    Tensor() = default;

    Tensor(TensorMeta meta, std::vector<std::byte> bytes) : meta_(std::move(meta)) {
        if (bytes.size() != meta_.byte_size())
            fail(ErrorKind::Integrity, "tensor '" + meta_.name + "' buffer holds " + std::to_string(bytes.size()) +
                                           " bytes, meta requires " + std::to_string(meta_.byte_size()));
        auto owned = std::make_shared<std::vector<std::byte>>(std::move(bytes));
        bytes_ = std::span<const std::byte>(owned->data(), owned->size());
        owner_ = std::move(owned);
    }

    Tensor(TensorMeta meta, std::shared_ptr<const void> owner, std::span<const std::byte> bytes)
        : meta_(std::move(meta)), owner_(std::move(owner)), bytes_(bytes), view_(true) {
        if (bytes_.size() != meta_.byte_size())
            fail(ErrorKind::Integrity, "tensor '" + meta_.name + "' view size does not match its meta");
    }

    /// Encodes `values` into `dtype` (round-to-nearest-even when narrowing).
    static Tensor from_values(std::string name, Shape shape, DType dtype, std::span<const double> values) {
        TensorMeta meta{std::move(name), std::move(shape), dtype, 0};
        if (values.size() != meta.numel())
            fail(ErrorKind::Compatibility, "tensor '" + meta.name + "' has " + std::to_string(values.size()) +
                                               " values for shape " + shape_to_string(meta.shape));
        std::vector<std::byte> bytes(meta.byte_size());
        for (std::size_t i = 0; i < values.size(); ++i) store_element(bytes, dtype, i, values[i]);
        return Tensor(std::move(meta), std::move(bytes));
    }

    static Tensor from_f32(std::string name, Shape shape, std::span<const float> values) {
        TensorMeta meta{std::move(name), std::move(shape), DType::F32, 0};
        if (values.size() != meta.numel())
            fail(ErrorKind::Compatibility, "tensor '" + meta.name + "' value count does not match its shape");
        const auto raw = std::as_bytes(values);
        return Tensor(std::move(meta), std::vector<std::byte>(raw.begin(), raw.end()));
    }

    const TensorMeta& meta() const { return meta_; }
    const std::string& name() const { return meta_.name; }
    const Shape& shape() const { return meta_.shape; }
    DType dtype() const { return meta_.dtype; }
    std::size_t numel() const { return meta_.numel(); }
    std::span<const std::byte> bytes() const { return bytes_; }

    double at(std::size_t i) const { return load_element(bytes_, meta_.dtype, i); }

    std::vector<double> to_f64() const {
        std::vector<double> out(numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = at(i);
        return out;
    }

    /// Exact for F32 and BF16 storage.
    std::vector<float> to_f32() const {
        std::vector<float> out(numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(at(i));
        return out;
    }

    Tensor with_dtype(DType dt) const {
        TensorMeta meta = meta_;
        meta.dtype = dt;
        return Tensor(std::move(meta), convert_payload(bytes_, meta_.dtype, dt));
    }

    /// True when the payload lives in a file mapping rather than owned memory.
    bool is_view() const { return view_; }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.meta_.name == b.meta_.name && a.meta_.shape == b.meta_.shape && a.meta_.dtype == b.meta_.dtype &&
               std::equal(a.bytes_.begin(), a.bytes_.end(), b.bytes_.begin(), b.bytes_.end());
    }

private:
    TensorMeta meta_;
    std::shared_ptr<const void> owner_;
    std::span<const std::byte> bytes_;
    bool view_ = false;
};

using Metadata = std::map<std::string, std::string>;

/// Ordered name -> tensor map. Immutable once shared; safe for concurrent reads.
class Checkpoint {
public:
    using Map = std::map<std::string, Tensor>;

    void insert(Tensor t) {
        const std::string name = t.name();
        if (name.empty()) fail(ErrorKind::Format, "tensor names must be non-empty");
        if (name == "__metadata__") fail(ErrorKind::Format, "'__metadata__' is reserved");
        if (!tensors_.emplace(name, std::move(t)).second)
            fail(ErrorKind::Format, "duplicate tensor name '" + name + "'");
    }

    void insert_or_assign(Tensor t) {
        const std::string name = t.name();
        tensors_.insert_or_assign(name, std::move(t));
    }

    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

    const Tensor& at(const std::string& name) const {
        auto it = tensors_.find(name);
        if (it == tensors_.end()) fail(ErrorKind::Compatibility, "no tensor named '" + name + "'");
        return it->second;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(tensors_.size());
        for (const auto& [name, _] : tensors_) out.push_back(name);
        return out;
    }

    std::size_t size() const { return tensors_.size(); }
    bool empty() const { return tensors_.empty(); }
    Map::const_iterator begin() const { return tensors_.begin(); }
    Map::const_iterator end() const { return tensors_.end(); }

    Metadata& metadata() { return metadata_; }
    const Metadata& metadata() const { return metadata_; }

    const std::string& source_path() const { return source_path_; }
    void set_source_path(std::string p) { source_path_ = std::move(p); }

    /// SHA-256 over names, dtypes, shapes and payload bytes in canonical
    /// order. Metadata and source path do not participate.
    std::string content_hash() const {
        Sha256 h;
        h.update(std::string_view("acm-checkpoint-v1"));
        for (const auto& [name, t] : tensors_) {
            h.update(name).update(std::string_view("\0", 1)).update(dtype_name(t.dtype()));
            h.update_pod(static_cast<std::uint64_t>(t.shape().size()));
            for (auto d : t.shape()) h.update_pod(static_cast<std::uint64_t>(d));
            h.update_pod(static_cast<std::uint64_t>(t.bytes().size()));
            h.update(t.bytes());
        }
        return h.hex_digest();
    }

    /// Structural and bitwise equality; metadata is compared too.
    friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
        return a.tensors_ == b.tensors_ && a.metadata_ == b.metadata_;
    }

private:
    Map tensors_;
    Metadata metadata_;
    std::string source_path_;
};

enum class DtypePolicy { Preserve, ForceF32, ForceBF16 };

struct LoadOptions {
    /// Tensors at or below this size are copied into memory; larger ones stay
    /// as views of the read-only file mapping and are paged in on demand.
    std::uint64_t resident_limit = 64ull << 20;
};

namespace detail {

class MappedFile {
public:
    explicit MappedFile(const std::filesystem::path& path) {
        fd_ = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
        if (fd_ < 0) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
        struct stat st{};
        if (::fstat(fd_, &st) != 0) {
            ::close(fd_);
            fail(ErrorKind::Io, "cannot stat '" + path.string() + "'");
        }
        if (!S_ISREG(st.st_mode)) {
            ::close(fd_);
            fail(ErrorKind::Io, "'" + path.string() + "' is not a regular file");
        }
        size_ = static_cast<std::size_t>(st.st_size);
        if (size_ > 0) {
            void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd_, 0);
            if (p == MAP_FAILED) {
                ::close(fd_);
                fail(ErrorKind::Io, "cannot map '" + path.string() + "'");
            }
            data_ = static_cast<const std::byte*>(p);
        }
    }
    MappedFile(const MappedFile&) = delete;
    MappedFile& operator=(const MappedFile&) = delete;
    ~MappedFile() {
        if (data_) ::munmap(const_cast<std::byte*>(data_), size_);
        if (fd_ >= 0) ::close(fd_);
    }

    std::span<const std::byte> bytes() const { return {data_, size_}; }

private:
    int fd_ = -1;
    const std::byte* data_ = nullptr;
    std::size_t size_ = 0;
};

inline std::uint64_t read_u64_le(const std::byte* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(p[i]);
    return v;
}

inline void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

}  // namespace detail

struct ParsedHeader {
    std::vector<TensorMeta> tensors;  // sorted by name
    Metadata metadata;
    std::uint64_t payload_offset = 0;  // absolute offset of the payload
};

/// Validates a safetensors header against a file of `file_size` bytes.
inline ParsedHeader parse_header(std::span<const std::byte> file, const std::string& label) {
    if (file.size() < 8) fail(ErrorKind::Integrity, label + ": file shorter than the 8-byte header length");
    const std::uint64_t header_len = detail::read_u64_le(file.data());
    if (header_len > file.size() - 8)
        fail(ErrorKind::Integrity, label + ": declared header length " + std::to_string(header_len) +
                                       " exceeds file size " + std::to_string(file.size()));

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(reinterpret_cast<const char*>(file.data() + 8),
                                       reinterpret_cast<const char*>(file.data() + 8 + header_len));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, label + ": header is not valid JSON (" + e.what() + ")");
    }
    if (!header.is_object()) fail(ErrorKind::Format, label + ": header must be a JSON object");

    ParsedHeader out;
    out.payload_offset = 8 + header_len;
    const std::uint64_t payload_size = file.size() - out.payload_offset;

    for (const auto& [key, value] : header.items()) {
        if (key == "__metadata__") {
            if (!value.is_object()) fail(ErrorKind::Format, label + ": __metadata__ must be an object");
            for (const auto& [mk, mv] : value.items()) {
                if (!mv.is_string()) fail(ErrorKind::Format, label + ": metadata value '" + mk + "' is not a string");
                out.metadata.emplace(mk, mv.get<std::string>());
            }
            continue;
        }
        if (!value.is_object() || !value.contains("dtype") || !value.contains("shape") ||
            !value.contains("data_offsets"))
            fail(ErrorKind::Format, label + ": entry '" + key + "' lacks dtype/shape/data_offsets");
        const auto& dt = value["dtype"];
        if (!dt.is_string()) fail(ErrorKind::Format, label + ": entry '" + key + "' dtype is not a string");
        auto dtype = parse_dtype(dt.get<std::string>());
        if (!dtype) fail(ErrorKind::Format, label + ": entry '" + key + "' has unsupported dtype " + dt.dump());

        TensorMeta meta{key, {}, *dtype, 0};
        const auto& shape = value["shape"];
        if (!shape.is_array()) fail(ErrorKind::Format, label + ": entry '" + key + "' shape is not an array");
        for (const auto& d : shape) {
            if (!d.is_number_unsigned()) fail(ErrorKind::Format, label + ": entry '" + key + "' has a bad dimension");
            meta.shape.push_back(d.get<std::int64_t>());
        }
        const auto& offs = value["data_offsets"];
        if (!offs.is_array() || offs.size() != 2 || !offs[0].is_number_unsigned() || !offs[1].is_number_unsigned())
            fail(ErrorKind::Format, label + ": entry '" + key + "' has malformed data_offsets");
        const auto begin = offs[0].get<std::uint64_t>(), end = offs[1].get<std::uint64_t>();
        if (end < begin) fail(ErrorKind::Format, label + ": entry '" + key + "' has reversed data_offsets");
        if (end - begin != meta.byte_size())
            fail(ErrorKind::Format, label + ": entry '" + key + "' spans " + std::to_string(end - begin) +
                                        " bytes but shape " + shape_to_string(meta.shape) + " x " +
                                        std::string(dtype_name(meta.dtype)) + " needs " +
                                        std::to_string(meta.byte_size()));
        if (end > payload_size)
            fail(ErrorKind::Integrity, label + ": entry '" + key + "' ends at byte " + std::to_string(end) +
                                           " but the payload holds " + std::to_string(payload_size));
        meta.byte_offset = begin;
        out.tensors.push_back(std::move(meta));
    }

    // overlapping spans indicate a corrupt header
    std::vector<const TensorMeta*> by_offset;
    for (const auto& t : out.tensors) by_offset.push_back(&t);
    std::sort(by_offset.begin(), by_offset.end(),
              [](auto* a, auto* b) { return a->byte_offset < b->byte_offset; });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        const auto* prev = by_offset[i - 1];
        if (prev->byte_size() > 0 && prev->byte_offset + prev->byte_size() > by_offset[i]->byte_offset)
            fail(ErrorKind::Format, label + ": entries '" + prev->name + "' and '" + by_offset[i]->name + "' overlap");
    }
    std::sort(out.tensors.begin(), out.tensors.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return out;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const LoadOptions& opts = {}) {
    auto mapping = std::make_shared<const detail::MappedFile>(path);
    const auto file = mapping->bytes();
    ParsedHeader header = parse_header(file, path.string());

    Checkpoint ckpt;
    ckpt.set_source_path(path.string());
    ckpt.metadata() = std::move(header.metadata);
    for (auto& meta : header.tensors) {
        const auto span = file.subspan(header.payload_offset + meta.byte_offset, meta.byte_size());
        if (meta.byte_size() > opts.resident_limit)
            ckpt.insert(Tensor(std::move(meta), mapping, span));
        else
            ckpt.insert(Tensor(std::move(meta), std::vector<std::byte>(span.begin(), span.end())));
    }
    return ckpt;
}

inline DType apply_policy(DType dt, DtypePolicy policy) {
    switch (policy) {
    case DtypePolicy::Preserve: return dt;
    case DtypePolicy::ForceF32: return DType::F32;
    case DtypePolicy::ForceBF16: return DType::BF16;
    }
    return dt;
}

/// Serialises a header for tensors laid out in the given (already sorted)
/// order. Returns the length prefix + padded JSON.
inline std::string encode_header(std::vector<TensorMeta>& layout, const Metadata& metadata) {
    nlohmann::json header = nlohmann::json::object();
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::uint64_t offset = 0;
    for (auto& meta : layout) {
        meta.byte_offset = offset;
        const std::uint64_t end = offset + meta.byte_size();
        header[meta.name] = {{"dtype", dtype_name(meta.dtype)}, {"shape", meta.shape}, {"data_offsets", {offset, end}}};
        offset = end;
    }
    std::string json = header.dump();
    while ((8 + json.size()) % 8 != 0) json.push_back(' ');
    std::string out;
    detail::append_u64_le(out, json.size());
    out += json;
    return out;
}

/// Streams tensors to disk one at a time. The full layout is fixed up front
/// so the header can be written first; tensors must then arrive in layout
/// order. The file appears at `path` only after finish().
class CheckpointWriter {
public:
    CheckpointWriter(std::filesystem::path path, std::vector<TensorMeta> layout, const Metadata& metadata)
        : path_(std::move(path)), tmp_(path_.string() + ".tmp"), layout_(std::move(layout)) {
        std::sort(layout_.begin(), layout_.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
        for (std::size_t i = 1; i < layout_.size(); ++i)
            if (layout_[i].name == layout_[i - 1].name)
                fail(ErrorKind::Format, "duplicate tensor name '" + layout_[i].name + "'");
        out_.open(tmp_, std::ios::binary | std::ios::trunc);
        if (!out_) fail(ErrorKind::Io, "cannot write '" + tmp_.string() + "'");
        const std::string header = encode_header(layout_, metadata);
        out_.write(header.data(), static_cast<std::streamsize>(header.size()));
        check_stream();
    }

    CheckpointWriter(const CheckpointWriter&) = delete;
    CheckpointWriter& operator=(const CheckpointWriter&) = delete;

    ~CheckpointWriter() {
        if (!finished_) {
            out_.close();
            std::error_code ec;
            std::filesystem::remove(tmp_, ec);
        }
    }

    const std::vector<TensorMeta>& layout() const { return layout_; }
    std::size_t written() const { return next_; }

    /// Writes the next tensor, converting to the layout dtype if needed.
    void write(const Tensor& t) {
        if (next_ >= layout_.size()) fail(ErrorKind::Format, "more tensors written than declared");
        const TensorMeta& want = layout_[next_];
        if (t.name() != want.name || t.shape() != want.shape)
            fail(ErrorKind::Format, "expected tensor '" + want.name + "' " + shape_to_string(want.shape) +
                                        ", got '" + t.name() + "' " + shape_to_string(t.shape()));
        if (t.dtype() == want.dtype) {
            out_.write(reinterpret_cast<const char*>(t.bytes().data()), static_cast<std::streamsize>(t.bytes().size()));
        } else {
            const auto bytes = convert_payload(t.bytes(), t.dtype(), want.dtype);
            out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        }
        check_stream();
        ++next_;
    }

    void finish() {
        if (next_ != layout_.size())
            fail(ErrorKind::Format, "only " + std::to_string(next_) + " of " + std::to_string(layout_.size()) +
                                        " tensors were written");
        out_.close();
        if (!out_) fail(ErrorKind::Io, "failed closing '" + tmp_.string() + "'");
        std::error_code ec;
        std::filesystem::rename(tmp_, path_, ec);
        if (ec) fail(ErrorKind::Io, "cannot move output into '" + path_.string() + "': " + ec.message());
        finished_ = true;
    }

private:
    void check_stream() {
        if (!out_) fail(ErrorKind::Io, "write to '" + tmp_.string() + "' failed");
    }

    std::filesystem::path path_;
    std::filesystem::path tmp_;
    std::vector<TensorMeta> layout_;
    std::ofstream out_;
    std::size_t next_ = 0;
    bool finished_ = false;
};

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                            DtypePolicy policy = DtypePolicy::Preserve) {
    std::vector<TensorMeta> layout;
    layout.reserve(ckpt.size());
    for (const auto& [_, t] : ckpt) {
        TensorMeta m = t.meta();
        m.dtype = apply_policy(m.dtype, policy);
        layout.push_back(std::move(m));
    }
    CheckpointWriter writer(path, std::move(layout), ckpt.metadata());
    for (const auto& [_, t] : ckpt) writer.write(t);
    writer.finish();
}

/// Throws a compatibility error naming every layer whose presence or shape
/// differs between `a` and `b`.
inline void assert_compatible(const Checkpoint& a, const Checkpoint& b) {
    std::vector<std::string> problems;
    for (const auto& [name, t] : a) {
        if (!b.contains(name))
            problems.push_back("'" + name + "' missing from second checkpoint");
        else if (b.at(name).shape() != t.shape())
            problems.push_back("'" + name + "' shape " + shape_to_string(t.shape()) + " vs " +
                               shape_to_string(b.at(name).shape()));
    }
    for (const auto& [name, _] : b)
        if (!a.contains(name)) problems.push_back("'" + name + "' missing from first checkpoint");
    if (problems.empty()) return;
    std::string msg = "checkpoints are incompatible: ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    fail(ErrorKind::Compatibility, msg);
}

}  // namespace acm
