#include "loramix/blob_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "loramix/errors.hpp"

namespace loramix {

namespace fs = std::filesystem;

std::string sha256_hex(std::span<const unsigned char> bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw IOError("SHA-256 computation failed");
    }
    static const char *hex = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

namespace {

std::vector<unsigned char> to_le_bytes(std::span<const double> values) {
    std::vector<unsigned char> bytes(values.size() * sizeof(double));
    std::memcpy(bytes.data(), values.data(), bytes.size());
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < values.size(); ++i)
            std::reverse(bytes.begin() + i * 8, bytes.begin() + (i + 1) * 8);
    }
    return bytes;
}

std::vector<unsigned char> read_bytes(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IOError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string write_blob(const fs::path &path, std::span<const double> values) {
    auto bytes = to_le_bytes(values);
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IOError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) throw IOError("write to '" + path.string() + "' failed");
    return sha256_hex(bytes);
}

std::vector<double> read_blob(const fs::path &path, std::size_t numel, const std::string &expected_sha256) {
    auto bytes = read_bytes(path);
    if (bytes.size() != numel * sizeof(double)) {
        throw FormatError("blob '" + path.string() + "' holds " + std::to_string(bytes.size()) + " bytes, expected " +
                          std::to_string(numel * sizeof(double)));
    }
    if (!expected_sha256.empty() && sha256_hex(bytes) != expected_sha256) {
        throw IntegrityError("checksum mismatch for '" + path.string() + "'");
    }
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < numel; ++i) std::reverse(bytes.begin() + i * 8, bytes.begin() + (i + 1) * 8);
    }
    std::vector<double> values(numel);
    std::memcpy(values.data(), bytes.data(), bytes.size());
    return values;
}

std::string read_text_file(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_atomic(const fs::path &path, const std::string &text) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) throw IOError("cannot write '" + tmp.string() + "'");
        out << text;
        out.close();
        if (!out) throw IOError("write to '" + tmp.string() + "' failed");
    }
    fs::rename(tmp, path, ec);
    if (ec) throw IOError("cannot move '" + tmp.string() + "' into place: " + ec.message());
}

}  // namespace loramix
