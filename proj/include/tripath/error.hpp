#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace tripath {

// Base for every error the library raises. `kind` is the stable error name
// (e.g. "MissingFile"), `subject` names the offending sample/tensor/file.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, std::string subject, const std::string& detail = {})
      : std::runtime_error(compose(kind, subject, detail)),
        kind_(std::move(kind)),
        subject_(std::move(subject)) {}

  const std::string& kind() const noexcept { return kind_; }
  const std::string& subject() const noexcept { return subject_; }

 private:
  static std::string compose(const std::string& kind, const std::string& subject,
                             const std::string& detail) {
    std::string msg = kind + "(\"" + subject + "\")";
    if (!detail.empty()) msg += ": " + detail;
    return msg;
  }

  std::string kind_;
  std::string subject_;
};

#define TRIPATH_DEFINE_ERROR(Name)                                         \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(std::string subject, const std::string& detail = {})     \
        : Error(#Name, std::move(subject), detail) {}                      \
  };

TRIPATH_DEFINE_ERROR(MissingFile)
TRIPATH_DEFINE_ERROR(ShapeMismatch)
TRIPATH_DEFINE_ERROR(ShapeError)
TRIPATH_DEFINE_ERROR(LabelOutOfRange)
TRIPATH_DEFINE_ERROR(InvalidArg)
TRIPATH_DEFINE_ERROR(MissingTensor)
TRIPATH_DEFINE_ERROR(InvalidWeights)
TRIPATH_DEFINE_ERROR(NonFiniteLoss)
TRIPATH_DEFINE_ERROR(AllZeroMap)
TRIPATH_DEFINE_ERROR(EmptyMatrix)
TRIPATH_DEFINE_ERROR(FormatError)

#undef TRIPATH_DEFINE_ERROR

}  // namespace tripath
