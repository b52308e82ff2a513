import init, { Demo } from "./pkg/hyperfast_demo.js";

const COLORS = [[220, 60, 50], [40, 110, 220], [40, 160, 70], [230, 160, 20]];
const RES = 60;
const CHUNK = 25;

const $ = (id) => document.getElementById(id);
const board = $("board");
const ctx = board.getContext("2d");
const spectrum = $("spectrum");

let demo = null;
let currentClass = 0;
let stopRequested = false;
let surface = null;

function status(text) {
  $("status").textContent = text;
}

function rgb(c, a = 1) {
  return `rgba(${c[0]},${c[1]},${c[2]},${a})`;
}

function toWorld(px, py) {
  return [(px / board.width) * 2 - 1, 1 - (py / board.height) * 2];
}

function toCanvas(x, y) {
  return [((x + 1) / 2) * board.width, ((1 - y) / 2) * board.height];
}

function buildClassButtons() {
  const host = $("classes");
  host.innerHTML = "";
  const n = Math.min(demo.max_classes(), COLORS.length);
  for (let k = 0; k < n; k++) {
    const b = document.createElement("button");
    b.innerHTML = `<span class="swatch" style="background:${rgb(COLORS[k])}"></span> ${k}`;
    b.onclick = () => {
      currentClass = k;
      [...host.children].forEach((c, i) => (c.style.fontWeight = i === k ? "bold" : "normal"));
    };
    host.appendChild(b);
  }
  host.children[currentClass]?.click();
}

function draw() {
  ctx.fillStyle = "#fff";
  ctx.fillRect(0, 0, board.width, board.height);
  if (surface) {
    const k = surface[0];
    const cell = board.width / RES;
    for (let i = 0; i < RES * RES; i++) {
      let best = 0;
      for (let c = 1; c < k; c++) {
        if (surface[1 + i * k + c] > surface[1 + i * k + best]) best = c;
      }
      const conf = surface[1 + i * k + best];
      ctx.fillStyle = rgb(COLORS[best % COLORS.length], 0.15 + 0.45 * conf);
      ctx.fillRect((i % RES) * cell, Math.floor(i / RES) * cell, cell + 1, cell + 1);
    }
  }
  const pts = demo.points();
  for (let i = 0; i < pts.length; i += 3) {
    const [cx, cy] = toCanvas(pts[i], pts[i + 1]);
    ctx.beginPath();
    ctx.arc(cx, cy, 5, 0, 2 * Math.PI);
    ctx.fillStyle = rgb(COLORS[pts[i + 2]]);
    ctx.fill();
    ctx.strokeStyle = "#000";
    ctx.stroke();
  }
}

function drawSpectrum(sigma) {
  const g = spectrum.getContext("2d");
  g.clearRect(0, 0, spectrum.width, spectrum.height);
  if (!sigma.length) return;
  const top = sigma[0] || 1;
  const w = spectrum.width / sigma.length;
  g.fillStyle = "#557";
  sigma.forEach((s, i) => {
    const h = (s / top) * (spectrum.height - 10);
    g.fillRect(i * w + 1, spectrum.height - h, w - 2, h);
  });
}

function fit() {
  surface = null;
  try {
    const warnings = demo.fit(
      Number($("ensemble").value),
      $("nnbias").checked,
      $("optimization").value,
      Number($("steps").value),
      Number($("seed").value),
    );
    surface = demo.surface(RES);
    drawSpectrum(demo.spectrum());
    const acc = demo.support_accuracy();
    status(`balanced accuracy on the drawn points: ${acc.toFixed(3)}` + (warnings ? `\n${warnings}` : ""));
  } catch (e) {
    status(String(e));
  }
  draw();
}

function reset() {
  demo = new Demo(Number($("seed").value), Number($("tasks").value));
  surface = null;
  buildClassButtons();
  drawSpectrum([]);
  draw();
}

async function train() {
  reset();
  stopRequested = false;
  $("train").disabled = true;
  $("stop").disabled = false;
  try {
    for (;;) {
      const [done, total, best, latest] = demo.train(CHUNK);
      $("progress").max = Math.max(total, 1);
      $("progress").value = done;
      status(`tasks ${done}/${total}  meta-val latest ${latest.toFixed(4)}  best ${best.toFixed(4)}`);
      if (done >= total || stopRequested) break;
      await new Promise((r) => setTimeout(r, 0));
    }
  } catch (e) {
    status(String(e));
  }
  $("train").disabled = false;
  $("stop").disabled = true;
  if (demo.points().length) fit();
}

board.addEventListener("click", (ev) => {
  const r = board.getBoundingClientRect();
  const [x, y] = toWorld(ev.clientX - r.left, ev.clientY - r.top);
  try {
    demo.add_point(x, y, currentClass);
  } catch (e) {
    status(String(e));
  }
  surface = null;
  draw();
});

$("train").onclick = train;
$("stop").onclick = () => (stopRequested = true);
$("fit").onclick = fit;
$("clear").onclick = () => {
  demo.clear_points();
  surface = null;
  drawSpectrum([]);
  draw();
};
$("file").onchange = async (ev) => {
  const file = ev.target.files[0];
  if (!file) return;
  try {
    demo.load_params(new Uint8Array(await file.arrayBuffer()));
    buildClassButtons();
    surface = null;
    status(`loaded ${file.name}`);
  } catch (e) {
    status(String(e));
  }
  draw();
};

await init();
reset();
status("Meta-train (or load a parameters file), click to place points, then fit.");
