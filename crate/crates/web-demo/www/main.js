import init, { circleFilters, colMask, decompose } from "./pkg/btcnn_web_demo.js";

const $ = (id) => document.getElementById(id);

function guard(errId, fn) {
  try {
    $(errId).textContent = "";
    fn();
  } catch (e) {
    $(errId).textContent = String(e.message ?? e);
  }
}

function drawFilters() {
  const n = Number($("cf-n").value);
  const k = Number($("cf-k").value);
  $("cf-n-v").textContent = n;
  guard("cf-err", () => {
    const flat = circleFilters(n, k);
    const cell = 6, gap = 4, perRow = Math.min(n, 12);
    const rows = Math.ceil(n / perRow);
    const c = $("cf-canvas");
    c.width = perRow * (k * cell + gap);
    c.height = rows * (k * cell + gap) + 14;
    const ctx = c.getContext("2d");
    ctx.clearRect(0, 0, c.width, c.height);
    let max = 0;
    for (let i = 0; i < n * k * k; i++) max = Math.max(max, Math.abs(flat[i]));
    for (let f = 0; f < n; f++) {
      const ox = (f % perRow) * (k * cell + gap);
      const oy = Math.floor(f / perRow) * (k * cell + gap);
      for (let y = 0; y < k; y++) {
        for (let x = 0; x < k; x++) {
          const v = flat[f * k * k + y * k + x] / max;
          const r = v > 0 ? 255 : Math.round(255 * (1 + v));
          const b = v < 0 ? 255 : Math.round(255 * (1 - v));
          const g = Math.round(255 * (1 - Math.abs(v)));
          ctx.fillStyle = `rgb(${r},${g},${b})`;
          ctx.fillRect(ox + x * cell, oy + y * cell, cell, cell);
        }
      }
    }
    ctx.fillStyle = "#444";
    ctx.font = "11px sans-serif";
    ctx.fillText("red positive, blue negative", 0, c.height - 3);
  });
}

function drawMask() {
  const out = Number($("col-out").value);
  const inp = Number($("col-in").value);
  const tau = Number($("col-tau").value);
  $("col-tau-v").textContent = tau.toFixed(2);
  guard("col-err", () => {
    const m = colMask(out, inp, tau);
    const kept = m.reduce((a, b) => a + b, 0);
    $("col-stats").textContent =
      `${kept} of ${m.length} connections kept (${(100 * kept / m.length).toFixed(1)}%)`;
    const cell = Math.max(2, Math.floor(400 / Math.max(out, inp)));
    const c = $("col-canvas");
    c.width = inp * cell;
    c.height = out * cell;
    const ctx = c.getContext("2d");
    for (let i = 0; i < out; i++) {
      for (let j = 0; j < inp; j++) {
        ctx.fillStyle = m[i * inp + j] ? "#246" : "#eee";
        ctx.fillRect(j * cell, i * cell, cell, cell);
      }
    }
  });
}

function showSplit() {
  guard("uq-err", () => {
    const rows = $("uq-input").value
      .split("\n")
      .map((l) => l.trim())
      .filter((l) => l.length > 0)
      .map((l) => l.split(/[\s,]+/).map(Number));
    if (rows.length === 0) throw new Error("enter at least one row");
    const classes = rows[0].length;
    if (rows.some((r) => r.length !== classes)) throw new Error("all rows need the same number of classes");
    const r = decompose(new Float64Array(rows.flat()), rows.length, classes);
    const mean = Array.from(r.slice(3)).map((p) => p.toFixed(3)).join("  ");
    $("uq-table").innerHTML = `
      <tr><td>members</td><td>${rows.length}</td></tr>
      <tr><td>mean prediction</td><td>${mean}</td></tr>
      <tr><td>total</td><td>${r[0].toFixed(4)} bits</td></tr>
      <tr><td>aleatoric</td><td>${r[1].toFixed(4)} bits</td></tr>
      <tr><td>epistemic</td><td>${r[2].toFixed(4)} bits</td></tr>`;
  });
}

await init();
$("cf-n").addEventListener("input", drawFilters);
$("cf-k").addEventListener("change", drawFilters);
for (const id of ["col-out", "col-in", "col-tau"]) $(id).addEventListener("input", drawMask);
$("uq-input").addEventListener("input", showSplit);
drawFilters();
drawMask();
showSplit();
