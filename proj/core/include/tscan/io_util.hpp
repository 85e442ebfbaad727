#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tscan {

// Whole-file helpers; throw IoError with the path on failure.
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& contents);

// FNV-1a over bytes; used for artifact fingerprints in manifests.
std::uint64_t fnv1a64(const void* data, std::size_t n);
std::string file_hash_hex(const std::string& path);
std::string bytes_hash_hex(const std::string& bytes);

// Shortest decimal form that round-trips a double exactly.
std::string format_double(double v);

// Little-endian float64 packing (byte-order independent of the host).
void append_f64_le(std::string& out, double v);
double read_f64_le(const unsigned char* p);
void append_u32_le(std::string& out, std::uint32_t v);
std::uint32_t read_u32_le(const unsigned char* p);

}  // namespace tscan
