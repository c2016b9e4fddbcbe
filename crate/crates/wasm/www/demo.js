import init, { Model, fit } from "./pkg/bspcopula_wasm.js";

const RES = 100;
const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

let truth = null;
let points = null;

// Density to colour on a log scale: white at 0, dark blue at the maximum.
function paint(canvas, grid, max) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(RES, RES);
  const top = Math.log1p(max);
  for (let i = 0; i < RES; i++) {
    for (let j = 0; j < RES; j++) {
      const t = Math.log1p(Math.max(grid[i * RES + j], 0)) / top;
      // u runs left to right, v bottom to top.
      const k = ((RES - 1 - j) * RES + i) * 4;
      img.data[k] = 255 * (1 - t);
      img.data[k + 1] = 255 * (1 - 0.8 * t);
      img.data[k + 2] = 255 - 90 * t;
      img.data[k + 3] = 255;
    }
  }
  const off = new OffscreenCanvas(RES, RES);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function scatter(canvas, pts) {
  const ctx = canvas.getContext("2d");
  ctx.fillStyle = "rgba(200, 40, 40, 0.5)";
  for (let k = 0; k < pts.length; k += 2) {
    ctx.fillRect(pts[k] * canvas.width - 1, (1 - pts[k + 1]) * canvas.height - 1, 2, 2);
  }
}

function table(model) {
  const e = model.entries();
  const rows = model.rows();
  const cols = model.cols();
  let html = "";
  for (let i = 0; i < rows; i++) {
    html += "<tr>";
    for (let j = 0; j < cols; j++) html += `<td>${e[i * cols + j].toFixed(4)}</td>`;
    html += "</tr>";
  }
  $("entries").innerHTML = html;
}

function guard(f) {
  return () => {
    $("status").textContent = "";
    try {
      f();
    } catch (err) {
      $("status").textContent = String(err.message ?? err);
    }
  };
}

function showTruth() {
  truth?.free();
  truth = new Model($("model").value);
  const grid = truth.density_grid(RES);
  paint($("truth"), grid, Math.max(...grid));
  if (points) scatter($("truth"), points);
}

function draw() {
  points = truth.sample(num("count"), BigInt(num("seed")));
  showTruth();
}

function runFit() {
  if (!points) draw();
  const t0 = performance.now();
  const result = fit(points, num("degree"), num("m"), num("n"), num("alpha"), num("beta"), num("iters"));
  const ms = performance.now() - t0;
  const model = result.model();
  const grid = model.density_grid(RES);
  paint($("fitted"), grid, Math.max(...grid));
  table(model);
  const err = model.squared_error(truth);
  $("fitcap").textContent =
    `fitted density: ${result.iterations} iterations, ${result.converged ? "converged" : "stopped"}, ` +
    `${ms.toFixed(0)} ms` + (Number.isNaN(err) ? "" : `, squared error ${err.toExponential(3)}`);
  model.free();
  result.free();
}

await init();
$("model").addEventListener("change", guard(() => { points = null; showTruth(); }));
$("draw").addEventListener("click", guard(draw));
$("fit").addEventListener("click", guard(runFit));
guard(showTruth)();
