#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace kbc {

enum class ImageFormat { Png, Jpeg };

std::string_view image_format_name(ImageFormat f) noexcept;
ImageFormat parse_image_format(std::string_view name);
std::string_view mime_type(ImageFormat f) noexcept;

/// Identifies PNG/JPEG by magic bytes.
std::optional<ImageFormat> sniff_image_format(std::string_view bytes) noexcept;

std::string base64_encode(std::string_view bytes);
/// Throws ParseError on malformed input.
std::string base64_decode(std::string_view text);

std::string sha256_hex(std::string_view bytes);
/// First eight digest bytes, big-endian. Stable across platforms.
std::uint64_t sha256_u64(std::string_view bytes);

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
};

/// Encodes a solid-colour RGB PNG. A non-empty `caption` is stored in a
/// tEXt chunk under the "Description" key.
std::string encode_solid_png(int width, int height, Rgb colour, std::string_view caption = {});

struct PngInfo {
    int width = 0;
    int height = 0;
    std::optional<std::string> caption;
};

/// Fully decodes a PNG (all rows); nullopt when the payload is not a valid PNG.
std::optional<PngInfo> decode_png(std::string_view bytes);

/// True when the payload decodes as PNG or carries a complete JPEG frame.
bool image_decodable(std::string_view bytes);

}  // namespace kbc

namespace kbc {

enum class Modality { Image, Text };

std::string_view modality_name(Modality m) noexcept;
Modality parse_modality(std::string_view name);

/// One modality's content: UTF-8 text, or encoded image bytes.
struct Payload {
    Modality modality = Modality::Text;
    std::string bytes;
    ImageFormat format = ImageFormat::Png;  // images only

    static Payload text(std::string s) { return Payload{Modality::Text, std::move(s), ImageFormat::Png}; }
    static Payload image(std::string b, ImageFormat f = ImageFormat::Png) {
        return Payload{Modality::Image, std::move(b), f};
    }
    bool operator==(const Payload&) const = default;
};

}  // namespace kbc
