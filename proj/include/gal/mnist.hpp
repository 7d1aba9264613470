#pragma once

#include <string>

#include "gal/data.hpp"

namespace gal {

// Reads an IDX image/label file pair (the MNIST container: big-endian headers,
// one byte per pixel/label). Pixels come back as doubles in [0,1] (byte/255),
// shaped [N,1,rows,cols]; image and label counts must agree. Raises DataError
// naming the file for missing/truncated files, wrong magic numbers, or a
// count mismatch.
ImageSet load_mnist_idx(const std::string& images_path, const std::string& labels_path);

// Inverse of the loader: quantizes pixels to bytes (values must already lie
// on the byte grid k/255, as synthetic sets do) and writes both IDX files.
// Labels must fit a byte.
void save_mnist_idx(const ImageSet& data, const std::string& images_path,
                    const std::string& labels_path);

}  // namespace gal
