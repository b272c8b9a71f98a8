#ifndef FELLERLAB_VERSION_HPP
#define FELLERLAB_VERSION_HPP

namespace fellerlab {

inline constexpr const char* library_version = "0.1.0";

}  // namespace fellerlab

#endif  // FELLERLAB_VERSION_HPP
