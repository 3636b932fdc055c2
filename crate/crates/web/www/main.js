import init, { resample_pattern, sampling_pattern, count_points, level_size } from "./pkg/msdeform_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#d7301f", "#2b8cbe", "#41ab5d", "#807dba"];
let ref = [0.5, 0.5];

function guarded(errId, fn) {
  return () => {
    try {
      fn();
      $(errId).textContent = "";
    } catch (e) {
      $(errId).textContent = e.message ?? String(e);
    }
  };
}

function paint(canvas, values, side) {
  const img = new ImageData(side, side);
  values.forEach((v, i) => {
    const g = Math.round(255 * Math.min(1, Math.max(0, v)));
    img.data.set([g, g, g, 255], 4 * i);
  });
  const off = new OffscreenCanvas(side, side);
  off.getContext("2d").putImageData(img, 0, 0);
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

const drawResample = guarded("resample-err", () => {
  const src = Number($("src").value);
  const out = Number($("out").value);
  for (const mode of ["bilinear", "discrete"]) {
    paint($(mode), resample_pattern(mode, src, out), out);
  }
});

const drawPattern = guarded("pattern-err", () => {
  const points = $("pattern-points").value;
  const rows = sampling_pattern(points, Number($("pattern-heads").value), ref[0], ref[1]);
  const canvas = $("pattern");
  const ctx = canvas.getContext("2d");
  const s = canvas.width;
  ctx.clearRect(0, 0, s, s);
  ctx.strokeStyle = "#ddd";
  for (let i = 1; i < 8; i++) {
    ctx.beginPath();
    ctx.moveTo((i * s) / 8, 0);
    ctx.lineTo((i * s) / 8, s);
    ctx.moveTo(0, (i * s) / 8);
    ctx.lineTo(s, (i * s) / 8);
    ctx.stroke();
  }
  const [rx, ry] = [ref[0] * s, ref[1] * s];
  for (let i = 0; i < rows.length; i += 4) {
    const [level, , x, y] = rows.slice(i, i + 4);
    ctx.strokeStyle = ctx.fillStyle = COLORS[level % COLORS.length];
    ctx.globalAlpha = 0.35;
    ctx.beginPath();
    ctx.moveTo(rx, ry);
    ctx.lineTo(x * s, y * s);
    ctx.stroke();
    ctx.globalAlpha = 1;
    ctx.beginPath();
    ctx.arc(x * s, y * s, 3, 0, 2 * Math.PI);
    ctx.fill();
  }
  ctx.fillStyle = "#000";
  ctx.fillRect(rx - 3, ry - 3, 6, 6);
  const levels = points.split(",").length;
  $("legend").innerHTML = Array.from({ length: levels }, (_, l) => {
    const n = level_size(l);
    return `<li style="color:${COLORS[l % COLORS.length]}">level ${l}: ${n}×${n}</li>`;
  }).join("");
});

const drawCount = guarded("count-err", () => {
  const total = count_points(
    $("count-points").value,
    Number($("count-heads").value),
    Number($("count-queries").value),
    Number($("count-layers").value),
  );
  $("total").textContent = total.toLocaleString();
});

await init();
for (const id of ["src", "out"]) $(id).addEventListener("input", drawResample);
for (const id of ["pattern-points", "pattern-heads"]) $(id).addEventListener("input", drawPattern);
for (const id of ["count-points", "count-heads", "count-queries", "count-layers"]) $(id).addEventListener("input", drawCount);
$("pattern").addEventListener("click", (e) => {
  const r = e.target.getBoundingClientRect();
  ref = [(e.clientX - r.left) / r.width, (e.clientY - r.top) / r.height];
  drawPattern();
});
drawResample();
drawPattern();
drawCount();
