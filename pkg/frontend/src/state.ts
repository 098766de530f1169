/**
 * Review-screen state machine, kept free of DOM concerns so the submission
 * invariants are enforced (and testable) in one place:
 *
 *  - submit is enabled only once a label is selected; discard needs no label
 *  - the record's action is derived from the dirty flag, so a revise record
 *    with unchanged text is impossible by construction
 *  - one in-flight submission at a time; repeats are rejected locally
 */

import {
  AnnotationPayload,
  Label,
  ReviewApiClient,
  SubmitAck,
  TaskView,
} from "./api.js";

export type ScreenPhase = "loading" | "task" | "empty" | "error";

export interface ReviewScreenState {
  phase: ScreenPhase;
  task: TaskView | null;
  premiseBuffer: string;
  hypothesisBuffer: string;
  selectedLabel: Label | null;
  dirty: boolean;
  inFlight: boolean;
  completed: number;
  discarded: number;
  lastError: string | null;
}

export type SubmitResult =
  | { kind: "advanced"; ack: SubmitAck }
  | { kind: "queue-empty"; ack: SubmitAck };

function freshState(): ReviewScreenState {
  return {
    phase: "loading",
    task: null,
    premiseBuffer: "",
    hypothesisBuffer: "",
    selectedLabel: null,
    dirty: false,
    inFlight: false,
    completed: 0,
    discarded: 0,
    lastError: null,
  };
}

export class ReviewScreen {
  readonly state: ReviewScreenState = freshState();

  constructor(private readonly client: ReviewApiClient) {}

  /** Fetch the next assignment and reset the buffers to its original text. */
  async loadNext(): Promise<ScreenPhase> {
    this.state.phase = "loading";
    this.state.lastError = null;
    const task = await this.client.fetchNext();
    if (task === null) {
      this.state.task = null;
      this.state.phase = "empty";
      return this.state.phase;
    }
    this.state.task = task;
    this.state.premiseBuffer = task.premise;
    this.state.hypothesisBuffer = task.hypothesis;
    this.state.selectedLabel = null;
    this.state.dirty = false;
    this.state.phase = "task";
    return this.state.phase;
  }

  setPremise(text: string): void {
    this.state.premiseBuffer = text;
    this.recomputeDirty();
  }

  setHypothesis(text: string): void {
    this.state.hypothesisBuffer = text;
    this.recomputeDirty();
  }

  selectLabel(label: Label): void {
    this.state.selectedLabel = label;
  }

  private recomputeDirty(): void {
    const task = this.state.task;
    this.state.dirty =
      task !== null &&
      (this.state.premiseBuffer !== task.premise ||
        this.state.hypothesisBuffer !== task.hypothesis);
  }

  /** Submit is gated on a selected label; discard has its own path. */
  canSubmit(): boolean {
    return (
      this.state.phase === "task" &&
      !this.state.inFlight &&
      this.state.selectedLabel !== null
    );
  }

  /**
   * The outgoing record for the chosen button. The action is derived from
   * the dirty flag: edited buffers make it a revision, untouched buffers a
   * plain label.
   */
  buildRecord(kind: "label" | "discard"): AnnotationPayload {
    const task = this.state.task;
    if (task === null) {
      throw new Error("no task on screen");
    }
    const base = {
      candidate_id: task.candidate_id,
      worker_id: this.client.worker,
      timestamp: Date.now() / 1000,
      idempotency_key: this.client.idempotencyKey(task.candidate_id),
    };
    if (kind === "discard") {
      return {
        ...base,
        action: "discard",
        label: null,
        revised_premise: null,
        revised_hypothesis: null,
      };
    }
    if (this.state.selectedLabel === null) {
      throw new Error("a label must be selected before submitting");
    }
    if (this.state.dirty) {
      return {
        ...base,
        action: "revise",
        label: this.state.selectedLabel,
        revised_premise: this.state.premiseBuffer,
        revised_hypothesis: this.state.hypothesisBuffer,
      };
    }
    return {
      ...base,
      action: "label_as_is",
      label: this.state.selectedLabel,
      revised_premise: null,
      revised_hypothesis: null,
    };
  }

  async submitLabel(): Promise<SubmitResult> {
    if (!this.canSubmit()) {
      throw new Error("submit is not enabled");
    }
    return this.send(this.buildRecord("label"), "label");
  }

  async submitDiscard(): Promise<SubmitResult> {
    if (this.state.phase !== "task" || this.state.inFlight) {
      throw new Error("discard is not enabled");
    }
    return this.send(this.buildRecord("discard"), "discard");
  }

  private async send(
    payload: AnnotationPayload,
    kind: "label" | "discard",
  ): Promise<SubmitResult> {
    this.state.inFlight = true;
    try {
      const ack = await this.client.submit(payload);
      if (kind === "discard") {
        this.state.discarded += 1;
      } else {
        this.state.completed += 1;
      }
      const phase = await this.loadNext();
      return { kind: phase === "empty" ? "queue-empty" : "advanced", ack };
    } finally {
      this.state.inFlight = false;
    }
  }
}
