/** Orbit camera math mirroring the server's pinhole conventions. */

export interface Orbit {
  azimuth: number;   // radians; 0 puts the eye on the +z axis
  elevation: number; // radians; positive looks down from above
  radius: number;    // > 0
  target: [number, number, number];
}

export interface CameraDict {
  W: number[]; // 12 floats, row-major 3x4 world-to-camera [R | t]
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  w: number;
  h: number;
}

type Vec3 = [number, number, number];

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function normalize(a: Vec3): Vec3 {
  const n = Math.hypot(a[0], a[1], a[2]);
  return [a[0] / n, a[1] / n, a[2] / n];
}

/** World-to-camera 3x4 looking from `eye` toward `target`, +z forward,
 *  rows [right, down, forward] and t = -R . eye. */
export function lookAt(eye: Vec3, target: Vec3,
                       up: Vec3 = [0, 1, 0]): number[] {
  const fwd = normalize(sub(target, eye));
  const right = normalize(cross(fwd, up));
  const down = cross(fwd, right);
  const R = [right, down, fwd];
  const t = R.map((row) => -(row[0] * eye[0] + row[1] * eye[1] + row[2] * eye[2]));
  return R.flatMap((row, i) => [...row, t[i]]);
}

export function orbitEye(orbit: Orbit): Vec3 {
  const { azimuth, elevation, radius, target } = orbit;
  const ce = Math.cos(elevation);
  return [
    target[0] + radius * Math.sin(azimuth) * ce,
    target[1] + radius * Math.sin(elevation),
    target[2] + radius * Math.cos(azimuth) * ce,
  ];
}

/** Camera message for an orbit pose at a given output resolution. */
export function orbitCamera(orbit: Orbit, size: number,
                            focal: number = 1.2 * 64): CameraDict {
  if (!(orbit.radius > 0)) {
    throw new Error("camera radius must be > 0");
  }
  const scale = size / 64; // focal given at the 64px reference resolution
  return {
    W: lookAt(orbitEye(orbit), orbit.target),
    fx: focal * scale,
    fy: focal * scale,
    cx: size / 2,
    cy: size / 2,
    w: size,
    h: size,
  };
}
