import init, { contour, weight_map, pr_curve } from "./pkg/rcsbnet_demo.js";

const KINDS = ["confidence", "dc_saliency", "dc_contour", "wiou", "focal"];
const N = 96;
const mask = new Uint8Array(N * N);
const $ = (id) => document.getElementById(id);

function seed() {
  mask.fill(0);
  for (let y = 0; y < N; y++) {
    for (let x = 0; x < N; x++) {
      const dy = y - 48, dx = x - 40;
      if (dx * dx / 900 + dy * dy / 500 < 1 || (x > 55 && x < 80 && y > 20 && y < 70)) mask[y * N + x] = 255;
    }
  }
}

function gray(canvas, bytes) {
  const img = canvas.getContext("2d").createImageData(N, N);
  for (let i = 0; i < N * N; i++) {
    img.data.set([bytes[i], bytes[i], bytes[i], 255], 4 * i);
  }
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function rgba(canvas, bytes) {
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(bytes), N, N), 0, 0);
}

function plot(values) {
  const c = $("pr"), g = c.getContext("2d");
  const [w, h] = [c.width, c.height];
  const p = values.slice(0, 256), r = values.slice(256, 512), f = values.slice(512);
  g.fillStyle = "#fff";
  g.fillRect(0, 0, w, h);
  g.strokeStyle = "#ccc";
  g.strokeRect(20, 10, w - 30, h - 30);
  g.strokeStyle = "#c33";
  g.beginPath();
  for (let t = 0; t < 256; t++) {
    const px = 20 + r[t] * (w - 30), py = 10 + (1 - p[t]) * (h - 30);
    t === 0 ? g.moveTo(px, py) : g.lineTo(px, py);
  }
  g.stroke();
  const mean = f.reduce((a, b) => a + b, 0) / f.length;
  $("fscore").textContent = `max F ${Math.max(...f).toFixed(4)}, mean F ${mean.toFixed(4)}`;
}

function render() {
  gray($("mask"), mask);
  const radius = Number($("radius").value);
  try {
    gray($("contour"), contour(mask, N, N, Number($("kernel").value)));
    rgba($("weights"), weight_map($("kind").value, mask, N, N, radius));
    plot(pr_curve(mask, N, N, radius));
  } catch (e) {
    $("fscore").textContent = String(e);
  }
}

function paint(ev) {
  if (!(ev.buttons & 1)) return;
  const rect = $("mask").getBoundingClientRect();
  const cx = Math.floor((ev.clientX - rect.left) * N / rect.width);
  const cy = Math.floor((ev.clientY - rect.top) * N / rect.height);
  for (let y = cy - 3; y <= cy + 3; y++) {
    for (let x = cx - 3; x <= cx + 3; x++) {
      if (x >= 0 && y >= 0 && x < N && y < N) mask[y * N + x] = ev.shiftKey ? 0 : 255;
    }
  }
  render();
}

await init();
for (const k of KINDS) $("kind").add(new Option(k, k));
$("mask").addEventListener("pointerdown", paint);
$("mask").addEventListener("pointermove", paint);
$("clear").addEventListener("click", () => { mask.fill(0); render(); });
for (const id of ["kernel", "kind", "radius"]) $(id).addEventListener("input", render);
seed();
render();
