import init, { loss_curves, volume_slice, tsne_clusters } from "./pkg/progsiam_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

// Blue for levels far from conversion, red for the conversion level.
function levelColor(rho) {
  const t = Math.min(Math.max((rho - 0.1) / 0.9, 0), 1);
  return `rgb(${Math.round(40 + 200 * t)}, 60, ${Math.round(220 - 180 * t)})`;
}

function report(fn) {
  try {
    $("err").textContent = "";
    fn();
  } catch (e) {
    $("err").textContent = String(e);
  }
}

function drawCurves() {
  const data = JSON.parse(loss_curves(num("dap"), num("margin"), 4.0, 161));
  const c = $("curves"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const ymax = Math.max(...data.curves.map((k) => k.values[0])) * 1.1;
  const px = (x) => 40 + (x / 4.0) * (c.width - 60);
  const py = (y) => c.height - 30 - (y / ymax) * (c.height - 50);
  g.strokeStyle = "#888";
  g.beginPath(); g.moveTo(px(0), py(0)); g.lineTo(px(4), py(0)); g.moveTo(px(0), py(0)); g.lineTo(px(0), py(ymax)); g.stroke();
  g.fillStyle = "#333";
  g.fillText("d_an", px(4) - 24, py(0) + 20);
  g.fillText("loss", 4, py(ymax) + 10);
  data.curves.forEach((k, i) => {
    const rho = Number(k.label.split(" ")[1]);
    g.strokeStyle = levelColor(rho);
    g.beginPath();
    data.d_an.forEach((d, j) => (j ? g.lineTo(px(d), py(k.values[j])) : g.moveTo(px(d), py(k.values[j]))));
    g.stroke();
    g.fillStyle = levelColor(rho);
    g.fillText(`${k.label}  α=${k.alpha.toFixed(1)}`, c.width - 130, 16 + 14 * i);
  });
}

function drawSlice() {
  $("levelv").textContent = $("level").value;
  const v = volume_slice(num("level"), 1.0, num("noise"), num("vseed"), num("z"));
  const c = $("slice"), g = c.getContext("2d");
  const n = 16, cell = c.width / n;
  for (let y = 0; y < n; y++) {
    for (let x = 0; x < n; x++) {
      const s = Math.round(255 * Math.min(Math.max(v[y * n + x] / 2.0, 0), 1));
      g.fillStyle = `rgb(${s},${s},${s})`;
      g.fillRect(x * cell, y * cell, cell, cell);
    }
  }
}

function drawTsne() {
  const pts = JSON.parse(tsne_clusters(num("per"), num("spread"), num("perp"), 1000, 7));
  const c = $("tsne"), g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const xs = pts.map((p) => p.x), ys = pts.map((p) => p.y);
  const [x0, x1, y0, y1] = [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
  for (const p of pts) {
    g.fillStyle = levelColor(p.rho);
    g.beginPath();
    g.arc(20 + ((p.x - x0) / (x1 - x0)) * (c.width - 40), 20 + ((p.y - y0) / (y1 - y0)) * (c.height - 40), 4, 0, 2 * Math.PI);
    g.fill();
  }
}

await init();
for (const id of ["dap", "margin"]) $(id).addEventListener("input", () => report(drawCurves));
for (const id of ["level", "noise", "z", "vseed"]) $(id).addEventListener("input", () => report(drawSlice));
$("run").addEventListener("click", () => report(drawTsne));
report(drawCurves);
report(drawSlice);
report(drawTsne);
