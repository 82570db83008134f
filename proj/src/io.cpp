#include "i3d/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <array>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <regex>
#include <sstream>

namespace i3d {
namespace fs = std::filesystem;

namespace {

struct PngReadState {
  std::string_view data;
  size_t offset = 0;
};

void png_read_from_memory(png_structp png, png_bytep out, png_size_t count) {
  auto* state = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (state->offset + count > state->data.size()) png_error(png, "truncated PNG");
  std::memcpy(out, state->data.data() + state->offset, count);
  state->offset += count;
}

void png_write_to_string(png_structp png, png_bytep data, png_size_t count) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), count);
}

void png_flush_noop(png_structp) {}

void png_error_throw(png_structp, png_const_charp msg) { throw IoError(std::string("png: ") + msg); }
void png_warning_ignore(png_structp, png_const_charp) {}

std::string encode_png_raw(int width, int height, int color_type, int channels, const std::uint8_t* pixels) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
  if (!png) throw IoError("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  std::string out;
  try {
    png_set_write_fn(png, &out, png_write_to_string, png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
      auto* row = const_cast<png_bytep>(pixels + static_cast<size_t>(y) * width * channels);
      png_write_row(png, row);
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

RgbImage decode_png(std::string_view bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
    throw IoError("png: not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
  if (!png) throw IoError("png: cannot create read struct");
  png_infop info = png_create_info_struct(png);
  PngReadState state{bytes, 0};
  RgbImage img;
  try {
    png_set_read_fn(png, &state, png_read_from_memory);
    png_read_info(png, info);
    const auto width = png_get_image_width(png, info);
    const auto height = png_get_image_height(png, info);
    const auto bit_depth = png_get_bit_depth(png, info);
    const auto color_type = png_get_color_type(png, info);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    if (png_get_rowbytes(png, info) != width * 3) throw IoError("png: unexpected row layout");
    img = RgbImage(static_cast<int>(width), static_cast<int>(height));
    for (png_uint_32 y = 0; y < height; ++y) png_read_row(png, img.pixels.data() + static_cast<size_t>(y) * width * 3, nullptr);
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

RgbImage read_png(const fs::path& path) { return decode_png(read_file(path)); }

std::string encode_png(const RgbImage& img) {
  return encode_png_raw(img.width, img.height, PNG_COLOR_TYPE_RGB, 3, img.pixels.data());
}

void write_png(const fs::path& path, const RgbImage& img) { write_file_atomic(path, encode_png(img)); }

void write_png_gray(const fs::path& path, const BinaryGrid& gray) {
  write_file_atomic(path, encode_png_raw(static_cast<int>(gray.cols()), static_cast<int>(gray.rows()),
                                         PNG_COLOR_TYPE_GRAY, 1, gray.data()));
}

// ---------------------------------------------------------------------------
// .npy

namespace {

std::string npy_header(const std::string& shape) {
  std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (" + shape + "), }";
  // magic(6) + version(2) + len(2) + dict + '\n' padded to a multiple of 64
  size_t total = 10 + dict.size() + 1;
  dict.append((64 - total % 64) % 64, ' ');
  dict.push_back('\n');
  std::string out("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(dict.size());
  out.push_back(static_cast<char>(len & 0xff));
  out.push_back(static_cast<char>(len >> 8));
  return out + dict;
}

std::vector<long> parse_npy(const std::string& bytes, size_t& data_offset) {
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw IoError("npy: bad magic");
  const auto major = static_cast<unsigned char>(bytes[6]);
  size_t header_len = 0;
  size_t pos = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
    pos = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw IoError("npy: truncated header");
    for (int i = 0; i < 4; ++i) header_len |= static_cast<size_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    pos = 12;
  } else {
    throw IoError("npy: unsupported version");
  }
  if (bytes.size() < pos + header_len) throw IoError("npy: truncated header");
  const std::string header = bytes.substr(pos, header_len);
  if (header.find("'<f4'") == std::string::npos) throw IoError("npy: only little-endian float32 is supported");
  if (header.find("'fortran_order': True") != std::string::npos) throw IoError("npy: fortran order not supported");
  std::smatch m;
  static const std::regex shape_re(R"('shape':\s*\(([^)]*)\))");
  if (!std::regex_search(header, m, shape_re)) throw IoError("npy: missing shape");
  std::vector<long> shape;
  std::stringstream ss(m[1].str());
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" ") == std::string::npos) continue;
    shape.push_back(std::stol(item));
  }
  data_offset = pos + header_len;
  long count = 1;
  for (long d : shape) count *= d;
  if (bytes.size() != data_offset + static_cast<size_t>(count) * 4) throw IoError("npy: data size mismatch");
  return shape;
}

}  // namespace

void write_npy(const fs::path& path, const GridF& grid) {
  std::string out = npy_header(std::to_string(grid.rows()) + ", " + std::to_string(grid.cols()));
  out.append(reinterpret_cast<const char*>(grid.data()), static_cast<size_t>(grid.size()) * sizeof(float));
  write_file_atomic(path, out);
}

GridF read_npy(const fs::path& path) {
  const std::string bytes = read_file(path);
  size_t offset = 0;
  const auto shape = parse_npy(bytes, offset);
  if (shape.size() != 2) throw IoError("npy: expected a 2D array in " + path.string());
  GridF g(shape[0], shape[1]);
  std::memcpy(g.data(), bytes.data() + offset, static_cast<size_t>(g.size()) * sizeof(float));
  return g;
}

void write_npy3(const fs::path& path, const std::vector<GridF>& channels) {
  if (channels.empty()) throw IoError("npy: no channels");
  const auto rows = channels[0].rows();
  const auto cols = channels[0].cols();
  const auto nc = channels.size();
  std::string out = npy_header(std::to_string(rows) + ", " + std::to_string(cols) + ", " + std::to_string(nc));
  std::vector<float> data(static_cast<size_t>(rows * cols) * nc);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c)
      for (size_t k = 0; k < nc; ++k) data[(static_cast<size_t>(r * cols + c)) * nc + k] = channels[k](r, c);
  out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  write_file_atomic(path, out);
}

std::vector<GridF> read_npy3(const fs::path& path) {
  const std::string bytes = read_file(path);
  size_t offset = 0;
  const auto shape = parse_npy(bytes, offset);
  if (shape.size() != 3) throw IoError("npy: expected a 3D array in " + path.string());
  const long rows = shape[0], cols = shape[1], nc = shape[2];
  std::vector<GridF> channels(static_cast<size_t>(nc), GridF(rows, cols));
  const auto* data = reinterpret_cast<const float*>(bytes.data() + offset);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c)
      for (long k = 0; k < nc; ++k) {
        float v;
        std::memcpy(&v, data + (r * cols + c) * nc + k, sizeof(float));
        channels[static_cast<size_t>(k)](r, c) = v;
      }
  return channels;
}

// ---------------------------------------------------------------------------

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::string_view bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t n = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8) | static_cast<unsigned char>(bytes[i + 2]);
    out += kB64[(n >> 18) & 63];
    out += kB64[(n >> 12) & 63];
    out += kB64[(n >> 6) & 63];
    out += kB64[n & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t n = static_cast<unsigned char>(bytes[i]) << 16;
    out += kB64[(n >> 18) & 63];
    out += kB64[(n >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t n = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out += kB64[(n >> 18) & 63];
    out += kB64[(n >> 12) & 63];
    out += kB64[(n >> 6) & 63];
    out += '=';
  }
  return out;
}

std::string base64_decode(std::string_view text) {
  // accept data URLs ("data:image/png;base64,....")
  if (text.rfind("data:", 0) == 0) {
    const auto comma = text.find(',');
    if (comma == std::string_view::npos) throw IoError("base64: malformed data URL");
    text.remove_prefix(comma + 1);
  }
  std::array<int, 256> lut;
  lut.fill(-1);
  for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(kB64[i])] = i;
  lut['-'] = 62;
  lut['_'] = 63;
  std::string out;
  out.reserve(text.size() * 3 / 4);
  std::uint32_t acc = 0;
  int bits = 0;
  for (char ch : text) {
    if (ch == '=' ) break;
    if (ch == '\n' || ch == '\r' || ch == ' ' || ch == '\t') continue;
    const int v = lut[static_cast<unsigned char>(ch)];
    if (v < 0) throw IoError("base64: invalid character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xff));
    }
  }
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw IoError("sha256 failed");
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return ss.str();
}

RgbImage resize_image(const RgbImage& img, int out_w, int out_h) {
  if (img.width == out_w && img.height == out_h) return img;
  RgbImage out(out_w, out_h);
  for (int c = 0; c < 3; ++c) {
    Grid ch(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) ch(y, x) = img.at(x, y, c);
    const Grid r = resize_bilinear(ch, out_h, out_w);
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(r(y, x)), 0l, 255l));
  }
  return out;
}

}  // namespace i3d
