import init, { proxy_curve, fake_quant_curve, gumbel_histogram } from "./pkg/dynaquant_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => parseFloat($(id).value);

function plot(canvas, series, { xmin, xmax, ymin, ymax }) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  const sx = (x) => pad + ((x - xmin) / (xmax - xmin)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((y - ymin) / (ymax - ymin)) * (h - 2 * pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#ccc";
  ctx.beginPath();
  ctx.moveTo(pad, sy(0));
  ctx.lineTo(w - pad, sy(0));
  ctx.moveTo(sx(0), pad);
  ctx.lineTo(sx(0), h - pad);
  ctx.stroke();
  ctx.fillStyle = "#666";
  ctx.fillText(xmin.toFixed(2), pad, h - 10);
  ctx.fillText(xmax.toFixed(2), w - pad - 24, h - 10);
  ctx.fillText(ymax.toFixed(2), 2, pad);
  for (const { xs, ys, color } of series) {
    ctx.strokeStyle = color;
    ctx.beginPath();
    xs.forEach((x, i) => (i ? ctx.lineTo(sx(x), sy(ys[i])) : ctx.moveTo(sx(x), sy(ys[i]))));
    ctx.stroke();
  }
}

function column(flat, stride, k) {
  const out = [];
  for (let i = k; i < flat.length; i += stride) out.push(flat[i]);
  return out;
}

function drawProxy() {
  const beta = num("beta");
  $("beta-out").textContent = beta.toFixed(1);
  const v = proxy_curve(beta, 200);
  const xs = column(v, 3, 0);
  const g = column(v, 3, 1).map((y, i) => Math.floor(xs[i]) + y);
  const gp = column(v, 3, 2);
  plot($("proxy"), [
    { xs, ys: g, color: "#1f77b4" },
    { xs, ys: gp, color: "#d62728" },
  ], { xmin: 0, xmax: 3, ymin: 0, ymax: Math.max(3, ...gp) });
}

function drawFakeQuant() {
  const bits = Math.round(num("bits"));
  const s = num("scale");
  const z = num("zp");
  const top = (2 ** bits - 1 - z) * s;
  const bottom = -z * s;
  const margin = 0.15 * (top - bottom);
  const v = fake_quant_curve(bits, s, z, num("fq-beta"), bottom - margin, top + margin, 800);
  const xs = column(v, 4, 0);
  const y = column(v, 4, 1);
  const ste = column(v, 4, 2);
  const dgm = column(v, 4, 3);
  const ymax = Math.max(top, ...dgm);
  plot($("fq"), [
    { xs, ys: xs.map((x) => x), color: "#eee" },
    { xs, ys: y, color: "#1f77b4" },
    { xs, ys: ste, color: "#2ca02c" },
    { xs, ys: dgm, color: "#d62728" },
  ], { xmin: xs[0], xmax: xs[xs.length - 1], ymin: Math.min(bottom, 0), ymax });
}

function drawGumbel() {
  const probs = ["p4", "p6", "p8"].map(num);
  const logits = new Float64Array(probs.map(Math.log));
  const v = gumbel_histogram(logits, num("tau"), 10000, BigInt(Date.now()));
  const ctx = $("gumbel").getContext("2d");
  const { width: w, height: h } = $("gumbel");
  ctx.clearRect(0, 0, w, h);
  const labels = ["4 bits", "6 bits", "8 bits"];
  const slot = w / 3;
  for (let k = 0; k < 3; k++) {
    const x = k * slot + slot / 2;
    const bars = [[v[k], "#1f77b4", -34], [v[k + 3], "#ff7f0e", 4]];
    for (const [val, color, dx] of bars) {
      ctx.fillStyle = color;
      const bh = val * (h - 50);
      ctx.fillRect(x + dx, h - 25 - bh, 30, bh);
      ctx.fillText(val.toFixed(3), x + dx, h - 30 - bh);
    }
    ctx.fillStyle = "#333";
    ctx.fillText(labels[k], x - 16, h - 8);
  }
}

function guard(f) {
  return () => {
    try {
      $("error").textContent = "";
      f();
    } catch (e) {
      $("error").textContent = e.message ?? String(e);
    }
  };
}

await init();
$("beta").addEventListener("input", guard(drawProxy));
for (const id of ["bits", "scale", "zp", "fq-beta"]) $(id).addEventListener("input", guard(drawFakeQuant));
$("draw").addEventListener("click", guard(drawGumbel));
guard(drawProxy)();
guard(drawFakeQuant)();
guard(drawGumbel)();
