#ifndef DESTRESS_DESTRESS_HPP
#define DESTRESS_DESTRESS_HPP

#include "destress/algorithms.hpp"
#include "destress/data.hpp"
#include "destress/errors.hpp"
#include "destress/harness.hpp"
#include "destress/mixing.hpp"
#include "destress/model.hpp"
#include "destress/rng.hpp"
#include "destress/topology.hpp"

#endif  // DESTRESS_DESTRESS_HPP
