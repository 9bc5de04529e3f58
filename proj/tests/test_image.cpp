#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "mixmil/image.hpp"

using namespace mixmil;

TEST_CASE("rgb png round trip") {
  const auto dir = testutil::scratch_dir("image_rgb");
  ImageRGB img(5, 7);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x) img.set(y, x, {static_cast<std::uint8_t>(x * 30), static_cast<std::uint8_t>(y * 50), 17});
  write_png(dir / "a.png", img);
  const ImageRGB back = read_png_rgb(dir / "a.png");
  CHECK(back.height == 5);
  CHECK(back.width == 7);
  CHECK(back.pixels == img.pixels);
}

TEST_CASE("gray png round trip keeps the unlabeled marker") {
  const auto dir = testutil::scratch_dir("image_gray");
  LabelImage labels(3, 4);
  labels.values[0] = 0;
  labels.values[5] = 3;
  write_png(dir / "l.png", labels);
  const LabelImage back = read_png_gray(dir / "l.png");
  CHECK(back.values == labels.values);
  CHECK(back.at(2, 3) == kUnlabeled);
}

TEST_CASE("corrupt or missing png raises an image error") {
  const auto dir = testutil::scratch_dir("image_bad");
  std::ofstream(dir / "bad.png") << "not a png at all";
  CHECK_THROWS_AS(read_png_rgb(dir / "bad.png"), ImageIoError);
  CHECK_THROWS_AS(read_png_rgb(dir / "missing.png"), ImageIoError);
}

TEST_CASE("crop copies the window and rejects out-of-bounds requests") {
  ImageRGB img(4, 4);
  img.set(2, 3, {9, 8, 7});
  const ImageRGB c = img.crop(1, 2, 2, 2);
  CHECK(c.height == 2);
  CHECK(c.at(1, 1) == Rgb{9, 8, 7});
  CHECK_THROWS(img.crop(3, 3, 2, 2));
}
