#pragma once

// Umbrella header for the style-augmentation segmentation toolkit.

#include "styleseg/augment.hpp"
#include "styleseg/autograd.hpp"
#include "styleseg/chart.hpp"
#include "styleseg/container.hpp"
#include "styleseg/dataset.hpp"
#include "styleseg/errors.hpp"
#include "styleseg/experiment.hpp"
#include "styleseg/image.hpp"
#include "styleseg/image_io.hpp"
#include "styleseg/metrics.hpp"
#include "styleseg/nn.hpp"
#include "styleseg/rng.hpp"
#include "styleseg/segnet.hpp"
#include "styleseg/stylizer.hpp"
#include "styleseg/tensor.hpp"
#include "styleseg/trainer.hpp"
