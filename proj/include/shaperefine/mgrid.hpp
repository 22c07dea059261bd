#pragma once

// Low-level MGRID container: one JSON header line, then a raw little-endian
// payload. Grids, FFD lattices and toy models all share it.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "json.hpp"

#include "shaperefine/volgrid.hpp"

namespace shaperefine::mgrid {

using json = nlohmann::json;

struct Blob {
  json header;
  std::vector<char> payload;
};

void write(std::ostream& out, const json& header, std::span<const float> payload);
void write(std::ostream& out, const json& header, std::span<const std::uint8_t> payload);

// Reads the header line and the rest of the stream as payload. The header must
// parse as a JSON object with magic "MGRID" and version 1.
Blob read(std::istream& in);
Blob read(const std::filesystem::path& path);

std::vector<float> decode_f32(const Blob& blob, std::size_t expected_count);
std::vector<std::uint8_t> decode_u8(const Blob& blob, std::size_t expected_count);

json geometry_to_json(const Geometry& g);
// Fills dims/spacing/origin from a header, naming the offending field on error.
Geometry geometry_from_json(const json& header);

json vec3_to_json(const Vec3& v);
Vec3 vec3_from_json(const json& j, const char* field);

void ensure_parent_directory(const std::filesystem::path& path);

}  // namespace shaperefine::mgrid
