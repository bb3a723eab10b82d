#pragma once

// XMRF: little-endian container of named float32 matrices.
//
//   magic "XMRF" | u32 version (=1) | u32 record count
//   per record: u16 key length | key bytes (UTF-8) | u32 rows | u32 cols |
//               u8 metadata flag (1 => u32 e1_pos, u32 e2_pos, u32 cls_pos) |
//               rows*cols float32 values (row-major)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mre/error.hpp"
#include "mre/tensor.hpp"

namespace mre::xmrf {

inline constexpr char kMagic[4] = {'X', 'M', 'R', 'F'};
inline constexpr std::uint32_t kVersion = 1;

struct Positions {
    std::uint32_t e1 = 0;
    std::uint32_t e2 = 0;
    std::uint32_t cls = 0;
    bool operator==(const Positions&) const = default;
};

struct Record {
    std::string key;
    Matrix<float> values;
    std::optional<Positions> positions;

    bool operator==(const Record& o) const {
        if (key != o.key || positions != o.positions || values.rows() != o.values.rows() ||
            values.cols() != o.values.cols())
            return false;
        return std::memcmp(values.data().data(), o.values.data().data(), values.size() * sizeof(float)) == 0;
    }
};

namespace detail {

static_assert(std::numeric_limits<float>::is_iec559 && sizeof(float) == 4);

template <typename U>
void put(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
public:
    Reader(const std::string& buf, std::string origin) : buf_(buf), origin_(std::move(origin)) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void floats(std::vector<float>& out, std::size_t n) {
        need(n * 4);
        out.resize(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<float>(get<std::uint32_t>());
    }

    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n)
            throw FormatError(origin_ + ": truncated XMRF data at byte " + std::to_string(pos_));
    }

    const std::string& buf_;
    std::string origin_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string encode(const std::vector<Record>& records) {
    std::string out(kMagic, 4);
    detail::put<std::uint32_t>(out, kVersion);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
    for (const auto& r : records) {
        if (r.key.size() > 0xFFFF) throw FormatError("record key too long: " + r.key.substr(0, 32) + "...");
        detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(r.key.size()));
        out += r.key;
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.values.rows()));
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.values.cols()));
        out.push_back(r.positions ? '\1' : '\0');
        if (r.positions) {
            detail::put<std::uint32_t>(out, r.positions->e1);
            detail::put<std::uint32_t>(out, r.positions->e2);
            detail::put<std::uint32_t>(out, r.positions->cls);
        }
        for (float f : r.values.data()) detail::put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    }
    return out;
}

inline std::vector<Record> decode(const std::string& buf, const std::string& origin = "<memory>") {
    detail::Reader rd(buf, origin);
    if (rd.bytes(4) != std::string(kMagic, 4)) throw FormatError(origin + ": bad XMRF magic");
    const auto version = rd.get<std::uint32_t>();
    if (version != kVersion) throw FormatError(origin + ": unsupported XMRF version " + std::to_string(version));
    const auto count = rd.get<std::uint32_t>();
    std::vector<Record> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Record r;
        r.key = rd.bytes(rd.get<std::uint16_t>());
        const auto rows = rd.get<std::uint32_t>();
        const auto cols = rd.get<std::uint32_t>();
        const auto flag = rd.get<std::uint8_t>();
        if (flag > 1) throw FormatError(origin + ": record '" + r.key + "' has bad metadata flag");
        if (flag == 1) r.positions = Positions{rd.get<std::uint32_t>(), rd.get<std::uint32_t>(), rd.get<std::uint32_t>()};
        std::vector<float> vals;
        rd.floats(vals, static_cast<std::size_t>(rows) * cols);
        r.values = Matrix<float>(rows, cols, std::move(vals));
        if (r.positions && (r.positions->e1 >= rows || r.positions->e2 >= rows || r.positions->cls >= rows))
            throw FormatError(origin + ": record '" + r.key + "' has positions outside its rows");
        out.push_back(std::move(r));
    }
    if (!rd.done()) throw FormatError(origin + ": trailing bytes after last record");
    return out;
}

// Writes to a sibling temporary file and renames it into place.
inline void write_file(const std::filesystem::path& path, const std::vector<Record>& records) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        const std::string bytes = encode(records);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<Record> read_file(const std::filesystem::path& path) {
    return decode(read_bytes(path), path.string());
}

// Keyed view over a decoded file.
class File {
public:
    File() = default;
    explicit File(std::vector<Record> records) {
        for (auto& r : records) {
            auto key = r.key;
            if (!index_.emplace(key, records_.size()).second) throw FormatError("duplicate record key '" + key + "'");
            records_.push_back(std::move(r));
        }
    }
    static File open(const std::filesystem::path& path) { return File(read_file(path)); }

    bool contains(const std::string& key) const { return index_.count(key) != 0; }

    const Record& at(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw FormatError("missing record key '" + key + "'");
        return records_[it->second];
    }

    const std::vector<Record>& records() const noexcept { return records_; }

private:
    std::vector<Record> records_;
    std::map<std::string, std::size_t> index_;
};

// Arbitrary bytes stored one per float (exact for 0..255), used for the
// self-describing config echo in checkpoints.
inline Record bytes_record(const std::string& key, const std::string& bytes) {
    Matrix<float> m(1, bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) m(0, i) = static_cast<float>(static_cast<unsigned char>(bytes[i]));
    return {key, std::move(m), std::nullopt};
}

inline std::string record_bytes(const Record& r) {
    std::string out;
    out.reserve(r.values.size());
    for (float f : r.values.data()) {
        if (!(f >= 0.0f && f <= 255.0f) || f != static_cast<float>(static_cast<int>(f)))
            throw FormatError("record '" + r.key + "' is not a byte record");
        out.push_back(static_cast<char>(static_cast<unsigned char>(f)));
    }
    return out;
}

} // namespace mre::xmrf
