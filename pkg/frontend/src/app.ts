/** Browser entry point: wires the review screen to the DOM. */

import { AuthError, Label, NetworkError, ReviewApiClient } from "./api.js";
import { ReviewScreen } from "./state.js";

const LABELS: Label[] = ["entailment", "neutral", "contradiction"];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function render(screen: ReviewScreen): void {
  const s = screen.state;
  el("task-card").hidden = s.phase !== "task";
  el("empty-state").hidden = s.phase !== "empty";
  el("error-banner").hidden = s.lastError === null;
  if (s.lastError !== null) {
    el("error-banner").textContent = s.lastError;
  }
  el("progress").textContent = `${s.completed} labeled · ${s.discarded} discarded`;
  if (s.phase === "task" && s.task) {
    (el<HTMLTextAreaElement>("premise")).value = s.premiseBuffer;
    (el<HTMLTextAreaElement>("hypothesis")).value = s.hypothesisBuffer;
    for (const label of LABELS) {
      el<HTMLButtonElement>(`label-${label}`).classList.toggle(
        "selected",
        s.selectedLabel === label,
      );
    }
    el<HTMLButtonElement>("submit").disabled = !screen.canSubmit();
    el("revise-hint").hidden = !s.dirty;
  }
}

async function guarded(screen: ReviewScreen, action: () => Promise<unknown>): Promise<void> {
  try {
    await action();
    screen.state.lastError = null;
  } catch (err) {
    if (err instanceof AuthError) {
      sessionStorage.removeItem("workerToken");
      el("login").hidden = false;
      el("main").hidden = true;
      return;
    }
    screen.state.lastError =
      err instanceof NetworkError
        ? "Connection problem — your work is safe, retrying is harmless."
        : String(err);
  }
  render(screen);
}

function start(workerId: string, token: string | null): void {
  const client = new ReviewApiClient("", workerId, token);
  const screen = new ReviewScreen(client);

  client.guidelines().then((text) => {
    el("guidelines").textContent = text;
  });

  el<HTMLTextAreaElement>("premise").addEventListener("input", (ev) => {
    screen.setPremise((ev.target as HTMLTextAreaElement).value);
    render(screen);
  });
  el<HTMLTextAreaElement>("hypothesis").addEventListener("input", (ev) => {
    screen.setHypothesis((ev.target as HTMLTextAreaElement).value);
    render(screen);
  });
  for (const label of LABELS) {
    el<HTMLButtonElement>(`label-${label}`).addEventListener("click", () => {
      screen.selectLabel(label);
      render(screen);
    });
  }
  el<HTMLButtonElement>("submit").addEventListener("click", () =>
    guarded(screen, () => screen.submitLabel()),
  );
  el<HTMLButtonElement>("discard").addEventListener("click", () =>
    guarded(screen, () => screen.submitDiscard()),
  );
  el<HTMLButtonElement>("retry").addEventListener("click", () =>
    guarded(screen, () => screen.loadNext()),
  );

  el("login").hidden = true;
  el("main").hidden = false;
  void guarded(screen, () => screen.loadNext());
}

export function boot(): void {
  el<HTMLButtonElement>("login-button").addEventListener("click", () => {
    const workerId = el<HTMLInputElement>("worker-id").value.trim();
    const token = el<HTMLInputElement>("worker-token").value.trim() || null;
    if (!workerId) {
      return;
    }
    sessionStorage.setItem("workerId", workerId);
    if (token) {
      sessionStorage.setItem("workerToken", token);
    }
    start(workerId, token);
  });

  const savedWorker = sessionStorage.getItem("workerId");
  if (savedWorker) {
    start(savedWorker, sessionStorage.getItem("workerToken"));
  }
}

if (typeof document !== "undefined" && document.getElementById("login")) {
  boot();
}
