#include "lpsr/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "lpsr/errors.hpp"

namespace lpsr {

void write_png(const PlateImage& image, const std::filesystem::path& path) {
    const Index h = image.height(), w = image.width();
    std::vector<png_byte> buf(static_cast<std::size_t>(h * w * 3));
    for (Index i = 0; i < h * w * 3; ++i) {
        const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
        buf[static_cast<std::size_t>(i)] = static_cast<png_byte>(std::lround(v * 255.0f));
    }
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr))
        throw IoError("cannot write " + path.string() + ": " + img.message);
}

PlateImage read_png(const std::filesystem::path& path) {
    png_image img;
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str()))
        throw IoError("cannot read " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&img);
        throw IoError("cannot decode " + path.string() + ": " + img.message);
    }
    PlateImage out(static_cast<Index>(img.height), static_cast<Index>(img.width));
    for (std::size_t i = 0; i < buf.size(); ++i) out.pixels[static_cast<Index>(i)] = buf[i] / 255.0f;
    return out;
}

}  // namespace lpsr
