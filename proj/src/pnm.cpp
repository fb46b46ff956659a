#include "moex/pnm.hpp"

#include <fstream>
#include <stdexcept>
#include <string>

namespace moex {
namespace {

struct PnmHeader {
  std::string magic;
  Index width = 0, height = 0;
  int maxval = 0;
};

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string token(std::istream& in) {
  std::string t;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!t.empty()) break;
      continue;
    }
    t.push_back(ch);
  }
  return t;
}

PnmHeader read_header(std::istream& in, const std::filesystem::path& path) {
  PnmHeader h;
  h.magic = token(in);
  try {
    h.width = std::stol(token(in));
    h.height = std::stol(token(in));
    h.maxval = std::stoi(token(in));
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": malformed PNM header");
  }
  if (h.maxval != 255 || h.width <= 0 || h.height <= 0)
    throw std::runtime_error(path.string() + ": only 8-bit PNM images with positive size are supported");
  return h;
}

}  // namespace

void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Image<std::uint8_t> read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const PnmHeader h = read_header(in, path);
  Index channels = 0;
  if (h.magic == "P5") {
    channels = 1;
  } else if (h.magic == "P6") {
    channels = 3;
  } else {
    throw std::runtime_error(path.string() + ": unsupported PNM type '" + h.magic + "'");
  }
  std::vector<std::uint8_t> raw(static_cast<std::size_t>(channels * h.width * h.height));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw std::runtime_error(path.string() + ": truncated pixel data");
  // Interleaved RGB -> planes.
  Image<std::uint8_t> img(channels, h.height, h.width);
  for (Index y = 0; y < h.height; ++y)
    for (Index x = 0; x < h.width; ++x)
      for (Index c = 0; c < channels; ++c) img.at(c, y, x) = raw[static_cast<std::size_t>((y * h.width + x) * channels + c)];
  return img;
}

GrayImage read_pgm(const std::filesystem::path& path) {
  const auto img = read_pnm(path);
  if (img.channels != 1) throw std::runtime_error(path.string() + ": expected a P5 graymap");
  return GrayImage{img.height, img.width, img.px, 0, 0};
}

void write_ppm(const Image<std::uint8_t>& img, const std::filesystem::path& path) {
  if (img.channels != 3) throw std::invalid_argument("write_ppm: need a 3-channel image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (Index y = 0; y < img.height; ++y)
    for (Index x = 0; x < img.width; ++x)
      for (Index c = 0; c < 3; ++c) out.put(static_cast<char>(img.at(c, y, x)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace moex
