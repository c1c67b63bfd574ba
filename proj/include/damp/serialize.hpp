#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "damp/matrix.hpp"

namespace damp {

// Binary container used for every on-disk artifact (datasets, embedding archives,
// encoder weights, run checkpoints). Layout: 8-byte magic, u32 kind, u32 version,
// then kind-specific fields written with the primitives below. Integers and
// doubles are stored in host byte order (single-platform artifact).
inline constexpr char kContainerMagic[8] = {'D', 'A', 'M', 'P', 'B', 'I', 'N', '1'};

enum class ContainerKind : uint32_t {
    dataset = 1,
    embeddings = 2,
    checkpoint = 3,
    encoder_weights = 4,
};

class BinWriter {
public:
    explicit BinWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
        if (!out_) throw std::runtime_error("BinWriter: cannot open " + path);
    }

    void header(ContainerKind kind, uint32_t version) {
        out_.write(kContainerMagic, 8);
        u32(static_cast<uint32_t>(kind));
        u32(version);
    }

    void u32(uint32_t v) { raw(&v, sizeof v); }
    void u64(uint64_t v) { raw(&v, sizeof v); }
    void i32(int32_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }

    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }

    void matrix(const Matrix& m) {
        u32(static_cast<uint32_t>(m.rows));
        u32(static_cast<uint32_t>(m.cols));
        raw(m.data.data(), m.data.size() * sizeof(double));
    }

    void doubles(const std::vector<double>& v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(double));
    }

    void finish() {
        out_.flush();
        if (!out_) throw std::runtime_error("BinWriter: write failure on " + path_);
    }

private:
    void raw(const void* p, size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

    std::ofstream out_;
    std::string path_;
};

class BinReader {
public:
    explicit BinReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw std::runtime_error("BinReader: cannot open " + path);
    }

    ContainerKind header(uint32_t expect_version) {
        char magic[8];
        raw(magic, 8);
        if (std::memcmp(magic, kContainerMagic, 8) != 0)
            throw std::runtime_error("BinReader: " + path_ + " is not a DAMP container (bad magic)");
        auto kind = static_cast<ContainerKind>(u32());
        uint32_t version = u32();
        if (version != expect_version)
            throw std::runtime_error("BinReader: " + path_ + " container version " + std::to_string(version) +
                                     ", expected " + std::to_string(expect_version));
        return kind;
    }

    void expect_kind(ContainerKind kind, uint32_t version, const std::string& what) {
        ContainerKind got = header(version);
        if (got != kind)
            throw std::runtime_error("BinReader: " + path_ + " holds container kind " +
                                     std::to_string(static_cast<uint32_t>(got)) + ", expected " + what);
    }

    uint32_t u32() {
        uint32_t v;
        raw(&v, sizeof v);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        raw(&v, sizeof v);
        return v;
    }
    int32_t i32() {
        int32_t v;
        raw(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        raw(&v, sizeof v);
        return v;
    }

    std::string str() {
        uint32_t n = u32();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }

    Matrix matrix() {
        uint32_t r = u32();
        uint32_t c = u32();
        Matrix m(static_cast<int>(r), static_cast<int>(c));
        raw(m.data.data(), m.data.size() * sizeof(double));
        return m;
    }

    std::vector<double> doubles() {
        uint64_t n = u64();
        std::vector<double> v(n);
        raw(v.data(), n * sizeof(double));
        return v;
    }

private:
    void raw(void* p, size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!in_) throw std::runtime_error("BinReader: truncated read from " + path_);
    }

    std::ifstream in_;
    std::string path_;
};

}  // namespace damp
