#pragma once

#include "moex/augment.hpp"
#include "moex/normalization.hpp"

#include <cstdint>
#include <filesystem>

namespace moex {

/// Binary portable graymap (P5, maxval 255).
void write_pgm(const GrayImage& img, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

/// Reads a P5 or P6 image (maxval 255) into C×H×W planes; P5 yields one channel.
Image<std::uint8_t> read_pnm(const std::filesystem::path& path);
void write_ppm(const Image<std::uint8_t>& img, const std::filesystem::path& path);

}  // namespace moex
