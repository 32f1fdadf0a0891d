#pragma once

#include "mirage/error.hpp"
#include "mirage/geometry.hpp"
#include "mirage/kdtree.hpp"
#include "mirage/plane.hpp"
#include "mirage/random.hpp"
#include "mirage/features.hpp"
#include "mirage/segmentation.hpp"
#include "mirage/registration.hpp"
#include "mirage/synthetic_scene.hpp"
#include "mirage/bytes.hpp"
#include "mirage/io.hpp"
#include "mirage/metrics.hpp"
#include "mirage/streaming/codec.hpp"
#include "mirage/streaming/frame_buffer.hpp"
#include "mirage/streaming/cue_pacer.hpp"
#include "mirage/streaming/udp.hpp"
#include "mirage/streaming/session_log.hpp"
#include "mirage/streaming/server.hpp"
#include "mirage/streaming/client.hpp"
#include "mirage/streaming/simulation.hpp"
