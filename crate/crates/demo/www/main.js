import init, { sampleTrajectory, convergenceCurve, tunePlan } from "./pkg/parmid_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function target() {
  return { condition: num("condition"), angle: num("angle"), mean: [0, 0] };
}

function sampler(extra = {}) {
  const kind = $("kind").value;
  const config = {
    kind,
    step_size: num("step"),
    points: num("points"),
    inner_steps: num("inner"),
    iterations: num("iterations"),
    seed: num("seed"),
    ...extra,
  };
  if (kind === "prklmc" || kind === "rklmc") config.friction = num("friction");
  return config;
}

function report(err) {
  $("status").textContent = err ? String(err.message ?? err) : "";
}

function clear(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  return ctx;
}

// Covariance ellipses at 1, 2 and 3 standard deviations.
function drawEllipses(ctx, toPx, mean, cov) {
  const [a, b, d] = [cov[0][0], cov[0][1], cov[1][1]];
  const tr = (a + d) / 2;
  const disc = Math.sqrt(((a - d) / 2) ** 2 + b * b);
  const [l1, l2] = [tr + disc, tr - disc];
  const theta = Math.atan2(l1 - a, b || 1e-300);
  ctx.strokeStyle = "#9ab";
  for (const k of [1, 2, 3]) {
    ctx.beginPath();
    for (let i = 0; i <= 96; i++) {
      const t = (2 * Math.PI * i) / 96;
      const [u, v] = [k * Math.sqrt(l1) * Math.cos(t), k * Math.sqrt(l2) * Math.sin(t)];
      const x = mean[0] + u * Math.cos(theta) - v * Math.sin(theta);
      const y = mean[1] + u * Math.sin(theta) + v * Math.cos(theta);
      const [px, py] = toPx(x, y);
      i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
    }
    ctx.stroke();
  }
}

function runTrajectory() {
  const start = [-3, 3];
  const req = { target: target(), sampler: sampler({ initial_point: { fixed: start } }) };
  const res = JSON.parse(sampleTrajectory(JSON.stringify(req)));
  const canvas = $("trajectory");
  const ctx = clear(canvas);
  const span = 4;
  const toPx = (x, y) => [
    ((x + span) / (2 * span)) * canvas.width,
    canvas.height - ((y + span) / (2 * span)) * canvas.height,
  ];
  drawEllipses(ctx, toPx, res.mean, res.covariance);
  ctx.strokeStyle = "rgba(200, 80, 40, 0.35)";
  ctx.beginPath();
  res.path.forEach(([x, y], i) => {
    const [px, py] = toPx(x, y);
    i === 0 ? ctx.moveTo(px, py) : ctx.lineTo(px, py);
  });
  ctx.stroke();
  ctx.fillStyle = "rgb(200, 80, 40)";
  for (const [x, y] of res.path) {
    const [px, py] = toPx(x, y);
    ctx.fillRect(px - 1, py - 1, 2, 2);
  }
  ctx.fillStyle = "#222";
  ctx.fillText(
    `${res.path.length - 1} iterations, ${res.gradient_evals} gradients, ${res.sequential_rounds} rounds` +
      (res.diverged ? " — diverged" : ""),
    8,
    16,
  );
  report(res.warnings.join("; "));
}

function runConvergence() {
  const iterations = num("iterations");
  const req = {
    target: target(),
    sampler: sampler({ initial_point: { fixed: [-3, 3] } }),
    chains: num("chains"),
    record_every: Math.max(1, Math.floor(iterations / 40)),
  };
  const res = JSON.parse(convergenceCurve(JSON.stringify(req)));
  const canvas = $("curve");
  const ctx = clear(canvas);
  const pad = 50;
  const values = res.rows.flatMap((r) => [r.w2, r.bound]).filter((v) => v > 0 && Number.isFinite(v));
  const lo = Math.log10(Math.min(...values)) - 0.2;
  const hi = Math.log10(Math.max(...values)) + 0.2;
  const toPx = (k, v) => [
    pad + (k / iterations) * (canvas.width - 2 * pad),
    canvas.height - pad - ((Math.log10(v) - lo) / (hi - lo)) * (canvas.height - 2 * pad),
  ];
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, canvas.width - 2 * pad, canvas.height - 2 * pad);
  ctx.fillStyle = "#222";
  for (let e = Math.ceil(lo); e <= Math.floor(hi); e++) {
    const [, py] = toPx(0, 10 ** e);
    ctx.fillText(`1e${e}`, 8, py + 4);
  }
  ctx.fillText(`iteration (0 … ${iterations})`, canvas.width / 2 - 40, canvas.height - 15);
  const series = (key, color) => {
    ctx.strokeStyle = color;
    ctx.beginPath();
    let started = false;
    for (const r of res.rows) {
      if (!(r[key] > 0)) continue;
      const [px, py] = toPx(r.iteration, r[key]);
      started ? ctx.lineTo(px, py) : ctx.moveTo(px, py);
      started = true;
    }
    ctx.stroke();
  };
  series("bound", "#36c");
  series("w2", "#c50");
  ctx.fillStyle = "#36c";
  ctx.fillText("error bound", pad + 8, pad + 16);
  ctx.fillStyle = "#c50";
  ctx.fillText("empirical W2", pad + 8, pad + 30);
  ctx.fillStyle = res.precondition_holds ? "#282" : "#a00";
  ctx.fillText(res.precondition_holds ? "precondition holds" : "precondition violated", pad + 8, pad + 44);
  report(res.warnings.join("; "));
}

function runTune() {
  const regime = $("regime").value;
  const req = {
    epsilon: num("epsilon"),
    strong_convexity: 1,
    smoothness: num("condition"),
    dimension: 2,
    w2_initial: Math.hypot(3, 3),
    regime,
  };
  const plan = JSON.parse(tunePlan(JSON.stringify(req)));
  $("plan").textContent = JSON.stringify(plan, null, 2);
  $("kind").value = regime === "kinetic" ? "prklmc" : "prlmc";
  $("step").value = plan.step_size;
  $("points").value = plan.points;
  $("inner").value = plan.inner_steps;
  $("iterations").value = Math.min(plan.iterations, 20000);
  if (plan.friction !== undefined) $("friction").value = plan.friction;
  report(plan.warnings.join("; "));
}

function guarded(fn) {
  return () => {
    try {
      fn();
    } catch (err) {
      report(err);
    }
  };
}

await init();
$("run-trajectory").addEventListener("click", guarded(runTrajectory));
$("run-convergence").addEventListener("click", guarded(runConvergence));
$("run-tune").addEventListener("click", guarded(runTune));
guarded(runTrajectory)();
