#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dbqa/dataset.hpp"
#include "dbqa/gateway.hpp"
#include "dbqa/metrics.hpp"

namespace scenario {

inline constexpr const char* kModel = "scripted-agent";

// Three conclusive and three interpretive questions; c3 sits on a database
// too large to dump into a single prompt.
std::vector<dbqa::Instance> mini_dataset();

dbqa::RunConfig config(dbqa::Strategy s);

// Agent and judge replies for every prompt of the scenario. on_call runs
// before each reply.
std::shared_ptr<dbqa::ChatProvider> provider(std::function<void()> on_call = {});

// Computed by hand from the fixture replies.
dbqa::MetricsTable expected_table();

}  // namespace scenario
