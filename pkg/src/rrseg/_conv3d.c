#include "_conv3d.h"

#define REAL float
#define RR_FN(name) name##_f32
#include "_conv3d_impl.h"
#undef REAL
#undef RR_FN

#define REAL double
#define RR_FN(name) name##_f64
#include "_conv3d_impl.h"
#undef REAL
#undef RR_FN
