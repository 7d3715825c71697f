#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "semconmf/errors.hpp"
#include "semconmf/matrix.hpp"

namespace semconmf {

/// 8-bit grayscale PNG of a matrix with values in [0, 1] (clamped).
inline void write_png_gray(const std::filesystem::path& path, const Matrix& values) {
  if (values.size() == 0) throw InvalidInput("cannot write an empty image");
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw InvalidInput("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw InvalidInput("libpng failed writing " + path.string());
  }
  const auto h = static_cast<png_uint_32>(values.rows());
  const auto w = static_cast<png_uint_32>(values.cols());
  png_init_io(png, fp);
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(w);
  for (png_uint_32 r = 0; r < h; ++r) {
    for (png_uint_32 c = 0; c < w; ++c)
      row[c] = static_cast<png_byte>(std::lround(std::clamp(values(r, c), 0.0, 1.0) * 255.0));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace semconmf
