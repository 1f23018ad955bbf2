#pragma once

// Command-line front ends. `dispatch` is the main tool; `teacher_dispatch`
// the companion that trains and inspects desk teachers. Both return process
// exit codes: 0 success, 2 usage, 3 data, 4 numeric, 5 io.

#include <ostream>
#include <string>
#include <vector>

namespace semdistill {

// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int teacher_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace semdistill
