#include <cmath>

#include "dexforge/hand_model.hpp"

namespace dexforge::hand {
namespace {

// Per-joint shape coefficients for the built-in right hand.
//
// Column k of joint j's mixing block is rest_offset_j * kBoneScale[j][k] +
// kLateral[j][.][k]: each beta component stretches every bone by at most 3%
// and nudges it sideways by at most 0.5 mm.

constexpr double kBoneScale[15][10] = {
    {-0.0177, -0.0299, 0.0201, 0.0144, 0.0085, 0.0060, 0.0080, -0.0020, -0.0253, -0.0006},
    {-0.0101, 0.0009, 0.0272, -0.0173, -0.0031, 0.0188, -0.0054, -0.0042, -0.0158, 0.0252},
    {-0.0026, 0.0032, 0.0131, 0.0207, -0.0169, 0.0225, 0.0009, -0.0114, 0.0040, 0.0134},
    {-0.0053, 0.0148, -0.0193, -0.0016, -0.0240, 0.0212, -0.0028, -0.0287, 0.0197, -0.0098},
    {-0.0058, 0.0227, 0.0099, 0.0133, -0.0232, -0.0009, 0.0167, 0.0191, -0.0241, 0.0094},
    {0.0210, 0.0089, -0.0269, -0.0187, -0.0297, -0.0058, 0.0300, -0.0091, 0.0123, 0.0263},
    {0.0272, -0.0186, 0.0033, -0.0062, -0.0133, -0.0066, -0.0004, -0.0070, -0.0287, 0.0109},
    {-0.0289, -0.0280, -0.0004, 0.0262, 0.0117, 0.0252, -0.0235, -0.0195, -0.0221, 0.0035},
    {-0.0156, -0.0061, -0.0142, 0.0142, 0.0267, -0.0259, -0.0006, -0.0091, 0.0243, -0.0024},
    {0.0175, -0.0023, 0.0059, -0.0170, -0.0243, 0.0277, -0.0271, -0.0234, -0.0212, -0.0108},
    {0.0132, -0.0123, 0.0113, -0.0141, 0.0049, -0.0116, -0.0291, -0.0300, 0.0004, 0.0238},
    {0.0273, -0.0229, 0.0172, -0.0274, 0.0194, -0.0003, 0.0181, 0.0224, -0.0264, 0.0279},
    {0.0066, 0.0090, -0.0269, -0.0004, -0.0295, 0.0092, -0.0159, -0.0289, -0.0230, 0.0221},
    {-0.0185, 0.0148, -0.0078, 0.0019, 0.0009, -0.0016, -0.0252, 0.0170, -0.0038, -0.0054},
    {0.0067, -0.0157, 0.0292, 0.0177, -0.0228, -0.0212, -0.0057, -0.0193, 0.0209, 0.0240},
};

constexpr double kLateral[15][3][10] = {
    {{-0.00026, -0.00047, 0.00005, 0.00022, 0.00043, 0.00004, 0.00046, 0.00044, -0.00020, -0.00039},
     {-0.00023, 0.00021, 0.00013, 0.00044, 0.00009, -0.00018, 0.00007, 0.00028, -0.00018, 0.00041},
     {0.00027, 0.00010, 0.00000, -0.00010, -0.00022, 0.00018, 0.00037, -0.00047, 0.00026, 0.00039}},
    {{-0.00030, -0.00009, 0.00030, -0.00018, 0.00030, 0.00042, -0.00038, -0.00032, -0.00032, -0.00013},
     {-0.00043, 0.00007, 0.00038, -0.00021, 0.00012, 0.00024, -0.00041, -0.00039, 0.00020, -0.00043},
     {-0.00047, 0.00041, 0.00006, 0.00005, -0.00012, -0.00014, -0.00048, 0.00021, -0.00031, 0.00049}},
    {{0.00034, 0.00010, 0.00021, -0.00026, 0.00014, 0.00050, 0.00038, 0.00006, 0.00015, 0.00020},
     {-0.00047, 0.00047, 0.00020, 0.00014, -0.00013, 0.00039, -0.00023, -0.00032, 0.00047, 0.00025},
     {0.00022, -0.00012, 0.00001, 0.00012, -0.00017, -0.00012, -0.00043, 0.00038, 0.00040, -0.00015}},
    {{-0.00035, 0.00042, -0.00011, -0.00032, 0.00044, 0.00050, 0.00004, 0.00012, 0.00042, 0.00014},
     {-0.00023, 0.00050, 0.00036, 0.00013, 0.00045, 0.00013, -0.00046, 0.00042, -0.00021, -0.00004},
     {0.00041, 0.00009, 0.00008, -0.00028, -0.00029, -0.00040, 0.00041, 0.00005, -0.00020, 0.00007}},
    {{0.00044, 0.00023, -0.00029, -0.00048, -0.00044, 0.00040, 0.00004, 0.00008, 0.00006, 0.00040},
     {0.00022, 0.00019, -0.00006, 0.00028, -0.00015, 0.00040, -0.00047, 0.00031, 0.00041, 0.00029},
     {0.00043, 0.00034, -0.00027, -0.00033, -0.00017, -0.00049, -0.00033, 0.00012, -0.00007, 0.00030}},
    {{-0.00028, 0.00013, -0.00005, 0.00036, -0.00041, -0.00033, 0.00001, 0.00024, 0.00043, -0.00042},
     {-0.00040, 0.00003, -0.00017, 0.00006, 0.00010, 0.00047, -0.00037, 0.00019, 0.00034, 0.00016},
     {-0.00006, 0.00034, 0.00025, -0.00024, 0.00025, -0.00029, 0.00047, 0.00037, 0.00011, 0.00000}},
    {{-0.00048, -0.00005, 0.00047, -0.00046, -0.00028, 0.00013, -0.00009, 0.00025, 0.00013, 0.00017},
     {-0.00024, -0.00050, -0.00045, 0.00041, -0.00010, 0.00035, 0.00040, -0.00024, -0.00037, 0.00039},
     {0.00007, 0.00020, -0.00043, 0.00018, 0.00043, 0.00033, -0.00046, -0.00005, 0.00025, 0.00049}},
    {{-0.00038, -0.00050, -0.00031, 0.00026, -0.00017, 0.00020, 0.00026, -0.00035, -0.00009, -0.00027},
     {0.00045, -0.00015, 0.00030, -0.00034, 0.00020, 0.00001, -0.00033, 0.00005, -0.00017, 0.00024},
     {-0.00038, 0.00000, -0.00049, 0.00029, 0.00011, -0.00023, -0.00021, -0.00004, -0.00015, -0.00036}},
    {{0.00000, 0.00049, 0.00032, 0.00031, -0.00013, -0.00004, -0.00015, -0.00007, 0.00003, -0.00023},
     {-0.00007, 0.00001, 0.00003, -0.00010, 0.00020, 0.00005, 0.00005, -0.00010, 0.00036, 0.00044},
     {-0.00047, -0.00028, 0.00044, -0.00018, 0.00043, -0.00029, -0.00019, 0.00008, -0.00004, 0.00013}},
    {{0.00027, -0.00049, -0.00038, -0.00009, 0.00020, -0.00003, 0.00036, -0.00007, 0.00027, 0.00037},
     {-0.00010, 0.00030, -0.00023, 0.00043, -0.00049, 0.00021, 0.00008, -0.00034, 0.00016, -0.00022},
     {-0.00003, -0.00044, -0.00035, 0.00045, -0.00006, -0.00003, 0.00040, 0.00000, 0.00024, 0.00024}},
    {{-0.00003, -0.00031, 0.00001, 0.00028, -0.00022, 0.00041, 0.00009, -0.00004, 0.00039, -0.00027},
     {0.00003, -0.00001, 0.00010, -0.00012, 0.00010, 0.00049, -0.00010, -0.00008, 0.00004, 0.00026},
     {-0.00025, 0.00039, 0.00003, -0.00029, -0.00035, -0.00028, 0.00046, -0.00044, 0.00030, -0.00017}},
    {{-0.00023, -0.00014, 0.00013, 0.00022, -0.00017, -0.00003, 0.00010, -0.00023, 0.00044, 0.00049},
     {-0.00048, -0.00005, -0.00015, -0.00030, -0.00002, -0.00040, 0.00040, -0.00021, 0.00045, -0.00006},
     {-0.00039, -0.00031, -0.00009, 0.00026, -0.00040, -0.00023, -0.00002, -0.00016, 0.00048, 0.00004}},
    {{0.00040, 0.00023, -0.00010, 0.00022, -0.00034, 0.00021, -0.00003, -0.00013, -0.00048, -0.00025},
     {-0.00047, -0.00019, -0.00002, 0.00006, -0.00020, 0.00027, -0.00021, -0.00009, -0.00023, -0.00015},
     {-0.00014, 0.00017, 0.00022, -0.00028, 0.00012, -0.00034, -0.00037, -0.00003, 0.00021, -0.00032}},
    {{-0.00011, 0.00013, 0.00025, -0.00014, 0.00005, 0.00006, 0.00041, -0.00034, -0.00006, 0.00020},
     {0.00020, 0.00039, 0.00003, 0.00002, -0.00047, -0.00025, 0.00010, 0.00031, 0.00014, -0.00018},
     {-0.00032, -0.00043, 0.00046, 0.00028, -0.00019, -0.00025, 0.00023, -0.00025, 0.00009, -0.00042}},
    {{0.00034, 0.00011, 0.00040, -0.00046, 0.00045, 0.00042, -0.00037, 0.00004, 0.00028, -0.00040},
     {0.00015, -0.00039, -0.00006, -0.00033, 0.00000, -0.00021, 0.00018, -0.00016, 0.00037, 0.00041},
     {0.00004, 0.00010, 0.00026, 0.00006, -0.00040, 0.00007, 0.00043, 0.00036, 0.00024, 0.00033}},
};

JointLimit locked() { return {0.0, 0.0}; }

JointDef make_joint(const char* name, int parent, Digit digit, Vec3 offset,
                    std::array<JointLimit, 3> limits) {
  JointDef j;
  j.name = name;
  j.parent = parent;
  j.digit = digit;
  j.rest_offset = offset;
  j.limits = limits;
  j.hinge_axis = 1;
  return j;
}

}  // namespace

// Right hand, palm facing -z, fingers along +x, thumb on the +y side. The
// thumb chain sits below the palm and flexes toward it, so thumb and fingers
// close on each other in the x-z plane. Axis 0 is twist (always locked),
// axis 1 flexion, axis 2 abduction.
HandSkeleton HandSkeleton::right_hand() {
  const JointLimit abd{-0.35, 0.35};
  std::vector<JointDef> j;
  j.reserve(kJointCount);

  JointDef wrist;
  wrist.name = "wrist";
  j.push_back(wrist);

  // The thumb frame is flipped about x so that positive flexion curls the
  // thumb toward +z. Offsets below are expressed in that flipped frame.
  JointDef cmc = make_joint("thumb_cmc", 0, Digit::kThumb, {0.030, 0.028, -0.025},
                            {locked(), JointLimit{-0.8, 1.2}, JointLimit{-0.5, 0.5}});
  cmc.rest_rotation = Vec3(M_PI, 0.0, 0.0);
  j.push_back(cmc);
  j.push_back(make_joint("thumb_mcp", 1, Digit::kThumb, {0.040, 0.0, 0.030},
                         {locked(), JointLimit{-0.2, 1.2}, locked()}));
  j.push_back(make_joint("thumb_ip", 2, Digit::kThumb, {0.035, 0.0, 0.0},
                         {locked(), JointLimit{-0.2, 1.4}, locked()}));
  j.back().segment_end = Vec3(0.028, 0.0, 0.0);

  struct FingerGeom {
    const char* names[3];
    Digit digit;
    Vec3 base;
    double lengths[3];
  };
  const FingerGeom fingers[4] = {
      {{"index_mcp", "index_pip", "index_dip"}, Digit::kIndex,
       {0.090, 0.025, 0.0}, {0.045, 0.027, 0.022}},
      {{"middle_mcp", "middle_pip", "middle_dip"}, Digit::kMiddle,
       {0.095, 0.005, 0.0}, {0.050, 0.030, 0.024}},
      {{"ring_mcp", "ring_pip", "ring_dip"}, Digit::kRing,
       {0.090, -0.015, 0.0}, {0.046, 0.028, 0.023}},
      {{"pinky_mcp", "pinky_pip", "pinky_dip"}, Digit::kPinky,
       {0.080, -0.033, 0.0}, {0.036, 0.021, 0.020}},
  };
  for (const auto& f : fingers) {
    const int base = static_cast<int>(j.size());
    j.push_back(make_joint(f.names[0], 0, f.digit, f.base,
                           {locked(), JointLimit{-0.5, 1.6}, abd}));
    j.push_back(make_joint(f.names[1], base, f.digit, {f.lengths[0], 0.0, 0.0},
                           {locked(), JointLimit{-0.1, 1.9}, locked()}));
    j.push_back(make_joint(f.names[2], base + 1, f.digit,
                           {f.lengths[1], 0.0, 0.0},
                           {locked(), JointLimit{-0.1, 1.4}, locked()}));
    j.back().segment_end = Vec3(f.lengths[2], 0.0, 0.0);
  }

  for (int a = 1; a < kJointCount; ++a) {
    auto& mix = j[a].shape_mix;
    for (int k = 0; k < kShapeDim; ++k) {
      for (int r = 0; r < 3; ++r) {
        mix(r, k) = j[a].rest_offset[r] * kBoneScale[a - 1][k] +
                    kLateral[a - 1][r][k];
      }
    }
  }

  // Tips (5), mid-phalanx dorsa (5), knuckle line (3), wrist (1). Dorsal is
  // +z for the fingers and local +z (world -z) for the flipped thumb.
  std::vector<MarkerSite> m = {
      {"thumb_tip", 3, {0.028, 0.0, 0.006}},
      {"index_tip", 6, {0.022, 0.0, 0.006}},
      {"middle_tip", 9, {0.024, 0.0, 0.006}},
      {"ring_tip", 12, {0.023, 0.0, 0.006}},
      {"pinky_tip", 15, {0.020, 0.0, 0.006}},
      {"thumb_mid", 2, {0.0175, 0.0, 0.008}},
      {"index_mid", 5, {0.0135, 0.0, 0.008}},
      {"middle_mid", 8, {0.015, 0.0, 0.008}},
      {"ring_mid", 11, {0.014, 0.0, 0.008}},
      {"pinky_mid", 14, {0.0105, 0.0, 0.008}},
      {"knuckle_index", 0, {0.090, 0.025, 0.012}},
      {"knuckle_middle", 0, {0.095, 0.005, 0.013}},
      {"knuckle_pinky", 0, {0.080, -0.033, 0.011}},
      {"wrist", 0, {0.0, 0.0, 0.015}},
  };
  return HandSkeleton("right_hand_v1", std::move(j), std::move(m), 3.0);
}

}  // namespace dexforge::hand
