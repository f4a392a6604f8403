#pragma once

#include <binspot/analysis.hpp>
#include <binspot/bench.hpp>
#include <binspot/binarizer.hpp>
#include <binspot/bitkernel.hpp>
#include <binspot/data.hpp>
#include <binspot/error.hpp>
#include <binspot/io.hpp>
#include <binspot/layers.hpp>
#include <binspot/model.hpp>
#include <binspot/packed.hpp>
#include <binspot/tensor.hpp>
#include <binspot/trainer.hpp>
#include <binspot/wavelet.hpp>
