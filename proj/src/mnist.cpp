#include "gal/mnist.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "gal/errors.hpp"

namespace gal {

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) throw DataError("cannot read " + path);
  return bytes;
}

// IDX headers are big-endian on disk, whatever the host is.
uint32_t read_u32be(const std::vector<unsigned char>& b, size_t at, const std::string& path) {
  if (at + 4 > b.size()) throw DataError(path + ": truncated header");
  return (static_cast<uint32_t>(b[at]) << 24) | (static_cast<uint32_t>(b[at + 1]) << 16) |
         (static_cast<uint32_t>(b[at + 2]) << 8) | static_cast<uint32_t>(b[at + 3]);
}

void write_u32be(std::ofstream& out, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

constexpr uint32_t kImageMagic = 0x00000803;
constexpr uint32_t kLabelMagic = 0x00000801;

}  // namespace

ImageSet load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto ib = read_file(images_path);
  const uint32_t imagic = read_u32be(ib, 0, images_path);
  if (imagic != kImageMagic)
    throw DataError(images_path + ": wrong magic for an IDX image file (got " +
                    std::to_string(imagic) + ", want " + std::to_string(kImageMagic) + ")");
  const uint32_t count = read_u32be(ib, 4, images_path);
  const uint32_t rows = read_u32be(ib, 8, images_path);
  const uint32_t cols = read_u32be(ib, 12, images_path);
  if (count == 0 || rows == 0 || cols == 0)
    throw DataError(images_path + ": empty image dimensions");
  const size_t want = 16 + static_cast<size_t>(count) * rows * cols;
  if (ib.size() < want) throw DataError(images_path + ": truncated image data");
  if (ib.size() > want) throw DataError(images_path + ": trailing bytes after image data");

  const auto lb = read_file(labels_path);
  const uint32_t lmagic = read_u32be(lb, 0, labels_path);
  if (lmagic != kLabelMagic)
    throw DataError(labels_path + ": wrong magic for an IDX label file (got " +
                    std::to_string(lmagic) + ", want " + std::to_string(kLabelMagic) + ")");
  const uint32_t lcount = read_u32be(lb, 4, labels_path);
  if (lcount != count)
    throw DataError(labels_path + ": " + std::to_string(lcount) + " labels for " +
                    std::to_string(count) + " images (count mismatch)");
  if (lb.size() < 8 + static_cast<size_t>(lcount))
    throw DataError(labels_path + ": truncated label data");
  if (lb.size() > 8 + static_cast<size_t>(lcount))
    throw DataError(labels_path + ": trailing bytes after label data");

  ImageSet set;
  set.images = Tensor({static_cast<int>(count), 1, static_cast<int>(rows), static_cast<int>(cols)});
  double* px = set.images.data();
  for (size_t i = 16; i < ib.size(); ++i) *px++ = static_cast<double>(ib[i]) / 255.0;
  set.labels.resize(count);
  for (uint32_t i = 0; i < count; ++i) set.labels[i] = static_cast<int>(lb[8 + i]);
  return set;
}

void save_mnist_idx(const ImageSet& data, const std::string& images_path,
                    const std::string& labels_path) {
  if (data.images.rank() != 4 || data.images.dim(1) != 1)
    throw DataError("save: images must be [N,1,rows,cols]");
  const int64_t n = data.images.dim(0);
  if (data.labels.size() != static_cast<size_t>(n))
    throw DataError("save: " + std::to_string(data.labels.size()) + " labels for " +
                    std::to_string(n) + " images (count mismatch)");

  std::ofstream iout(images_path, std::ios::binary | std::ios::trunc);
  if (!iout) throw DataError("cannot open " + images_path + " for writing");
  write_u32be(iout, kImageMagic);
  write_u32be(iout, static_cast<uint32_t>(n));
  write_u32be(iout, static_cast<uint32_t>(data.images.dim(2)));
  write_u32be(iout, static_cast<uint32_t>(data.images.dim(3)));
  std::vector<unsigned char> buf(static_cast<size_t>(data.images.size()));
  for (int64_t i = 0; i < data.images.size(); ++i) {
    const double v = data.images[i];
    if (!(v >= 0.0 && v <= 1.0))
      throw DataError("save: pixel " + std::to_string(i) + " = " + std::to_string(v) +
                      " outside [0,1]");
    buf[static_cast<size_t>(i)] = static_cast<unsigned char>(std::llround(v * 255.0));
  }
  iout.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!iout.good()) throw DataError("cannot write " + images_path);
  iout.close();

  std::ofstream lout(labels_path, std::ios::binary | std::ios::trunc);
  if (!lout) throw DataError("cannot open " + labels_path + " for writing");
  write_u32be(lout, kLabelMagic);
  write_u32be(lout, static_cast<uint32_t>(n));
  for (int label : data.labels) {
    if (label < 0 || label > 255) throw DataError("save: label " + std::to_string(label) + " does not fit a byte");
    const unsigned char b = static_cast<unsigned char>(label);
    lout.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!lout.good()) throw DataError("cannot write " + labels_path);
}

}  // namespace gal
